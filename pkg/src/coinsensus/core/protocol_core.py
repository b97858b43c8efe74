"""
协议核心模块

所有协议模块共享的取值类型、实例标签、系统参数、消息与效果定义，
以及事件驱动状态机的统一约定：step(state, event) -> (新状态, 效果列表)。

状态机只返回效果 (Broadcast / RequestCoin / Decide / 通知)，自身从不做 I/O。
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any, ClassVar, Dict, FrozenSet, Iterable, List, Optional, Protocol, Tuple, Union

from coinsensus.core.common_utils import (
    decode_value,
    encode_value,
    encode_values,
    is_binary,
    is_est_value,
)


# ------------------ 异常 ------------------

class CoinsensusError(Exception):
    """所有库内异常的基类"""


class InvalidParams(CoinsensusError):
    """系统参数不满足 t < n/3"""


class ConfigError(CoinsensusError):
    """运行配置非法"""


class DuplicateInit(CoinsensusError):
    """同一进程对同一标签重复初始化实例"""


class DuplicateProposal(CoinsensusError):
    """同一进程重复调用 propose"""


class ProtocolViolation(CoinsensusError):
    """引理层面不可能出现的状态，被观察者记录为安全性违规"""

    def __init__(self, check: str, detail: str = ""):
        super().__init__(f"{check}: {detail}" if detail else check)
        self.check = check
        self.detail = detail


class TagError(CoinsensusError):
    """实例标签与抽象不匹配，或跨算法变体比较标签"""


# ------------------ 系统参数 ------------------

@dataclass(frozen=True)
class SystemParams:
    """n 个进程、最多 t 个拜占庭进程，以及本次运行中被指定为正确的进程集合"""
    n: int
    t: int
    non_faulty: FrozenSet[int]

    @property
    def t_plus_1(self) -> int:
        return self.t + 1

    @property
    def two_t_plus_1(self) -> int:
        return 2 * self.t + 1

    @property
    def n_minus_t(self) -> int:
        return self.n - self.t

    @property
    def faulty(self) -> FrozenSet[int]:
        return frozenset(range(self.n)) - self.non_faulty

    def is_valid_pid(self, pid: Any) -> bool:
        return isinstance(pid, int) and not isinstance(pid, bool) and 0 <= pid < self.n


def validate_params(n: int, t: int, non_faulty: Optional[Iterable[int]] = None) -> SystemParams:
    """
    校验并构造系统参数

    Args:
        n: 进程数
        t: 最多拜占庭进程数
        non_faulty: 正确进程集合，默认取编号最小的 n-t 个进程

    Returns:
        SystemParams: 参数对象，提供 t+1 / 2t+1 / n-t 三个法定人数

    Raises:
        InvalidParams: t >= n/3 或 正确进程集合不合法
    """
    if n < 1 or t < 0:
        raise InvalidParams(f"需要 n >= 1 且 t >= 0: n={n}, t={t}")
    if 3 * t >= n:
        raise InvalidParams(f"t < n/3 violated: n={n}, t={t}")
    if non_faulty is None:
        members = frozenset(range(n - t))
    else:
        members = frozenset(non_faulty)
    if any(not (0 <= p < n) for p in members):
        raise InvalidParams(f"正确进程编号越界: {sorted(members)}")
    if len(members) < n - t:
        raise InvalidParams(f"正确进程数 {len(members)} 少于 n-t={n - t}")
    return SystemParams(n=n, t=t, non_faulty=members)


# ------------------ 实例标签 ------------------

@dataclass(frozen=True, order=True)
class StageTag:
    """weak 算法中 SBV 实例的标签 stage[round, phase]"""
    round: int
    phase: int

    variant: ClassVar[str] = "stage"

    def to_json(self) -> Dict[str, Any]:
        return {"variant": self.variant, "round": self.round, "phase": self.phase}


@dataclass(frozen=True, order=True)
class EstTag:
    """strong 算法中 S-Broadcast 实例的标签 est[round]"""
    round: int

    variant: ClassVar[str] = "est"

    def to_json(self) -> Dict[str, Any]:
        return {"variant": self.variant, "round": self.round}


InstanceTag = Union[StageTag, EstTag]


def tag_order(a: InstanceTag, b: InstanceTag) -> int:
    """
    标签全序：轮次优先，阶段其次

    Returns:
        int: -1 / 0 / 1

    Raises:
        TagError: Stage 与 Est 标签属于不同算法，不可比较
    """
    if type(a) is not type(b):
        raise TagError(f"不同变体的标签不可比较: {a!r} vs {b!r}")
    if a == b:
        return 0
    return -1 if a < b else 1


# ------------------ 消息 ------------------

@dataclass(frozen=True)
class Bval:
    """BV-Broadcast 的 BVAL(v)"""
    tag: StageTag
    value: int
    sender: int

    kind: ClassVar[str] = "BVAL"

    @property
    def round(self) -> int:
        return self.tag.round

    def to_json(self) -> Dict[str, Any]:
        return {"kind": self.kind, "tag": self.tag.to_json(),
                "value": encode_value(self.value), "sender": self.sender}


@dataclass(frozen=True)
class Aux:
    """SBV-Broadcast 的 AUX(w)"""
    tag: StageTag
    value: int
    sender: int

    kind: ClassVar[str] = "AUX"

    @property
    def round(self) -> int:
        return self.tag.round

    def to_json(self) -> Dict[str, Any]:
        return {"kind": self.kind, "tag": self.tag.to_json(),
                "value": encode_value(self.value), "sender": self.sender}


@dataclass(frozen=True)
class Sval:
    """S-Broadcast 的 SVAL(v)"""
    tag: EstTag
    value: int
    sender: int

    kind: ClassVar[str] = "SVAL"

    @property
    def round(self) -> int:
        return self.tag.round

    def to_json(self) -> Dict[str, Any]:
        return {"kind": self.kind, "tag": self.tag.to_json(),
                "value": encode_value(self.value), "sender": self.sender}


@dataclass(frozen=True)
class AuxSet:
    """weak 算法两次 SBV 之间广播的 AUXSET(r, set)"""
    round: int
    values: FrozenSet[int]
    sender: int

    kind: ClassVar[str] = "AUXSET"

    def to_json(self) -> Dict[str, Any]:
        return {"kind": self.kind, "tag": {"variant": "round", "round": self.round},
                "value": encode_values(self.values), "sender": self.sender}


@dataclass(frozen=True)
class AuxBin:
    """strong 算法每轮一次的 AUX(r, w)"""
    round: int
    value: int
    sender: int

    kind: ClassVar[str] = "AUXBIN"

    def to_json(self) -> Dict[str, Any]:
        return {"kind": self.kind, "tag": {"variant": "round", "round": self.round},
                "value": encode_value(self.value), "sender": self.sender}


ProtocolMessage = Union[Bval, Aux, Sval, AuxSet, AuxBin]

MESSAGE_KINDS = ("BVAL", "AUX", "SVAL", "AUXSET", "AUXBIN")


def message_from_json(data: Dict[str, Any]) -> ProtocolMessage:
    """
    从 trace / 脚本编码还原消息

    只做结构还原，不校验取值是否合法；畸形内容交给 is_well_formed 判定。

    Raises:
        ConfigError: 结构无法识别
    """
    try:
        kind = data["kind"]
        sender = data["sender"]
        tag = data.get("tag", {})
        raw = data.get("value")
        if kind in ("BVAL", "AUX"):
            stage = StageTag(int(tag["round"]), int(tag.get("phase", 0)))
            cls = Bval if kind == "BVAL" else Aux
            return cls(stage, decode_value(raw), sender)
        if kind == "SVAL":
            return Sval(EstTag(int(tag["round"])), decode_value(raw), sender)
        if kind == "AUXSET":
            return AuxSet(int(tag["round"]), frozenset(decode_value(v) for v in raw), sender)
        if kind == "AUXBIN":
            return AuxBin(int(tag["round"]), decode_value(raw), sender)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"无法解析消息 {data!r}: {e}") from e
    raise ConfigError(f"未知消息类型: {data.get('kind')!r}")


def is_well_formed(msg: ProtocolMessage, params: SystemParams) -> bool:
    """
    判断消息是否满足格式约束

    拜占庭进程可以发送任意内容；接收方对畸形消息只计数丢弃。
    """
    if not params.is_valid_pid(msg.sender):
        return False
    if isinstance(msg, (Bval, Aux)):
        if not isinstance(msg.tag, StageTag) or msg.tag.round < 1 or msg.tag.phase not in (0, 1):
            return False
        if msg.tag.phase == 0:
            return is_binary(msg.value)
        return is_est_value(msg.value)
    if isinstance(msg, Sval):
        return isinstance(msg.tag, EstTag) and msg.tag.round >= 1 and is_binary(msg.value)
    if isinstance(msg, AuxSet):
        return (msg.round >= 1 and len(msg.values) > 0
                and all(is_binary(v) for v in msg.values))
    if isinstance(msg, AuxBin):
        return msg.round >= 1 and is_binary(msg.value)
    return False


# ------------------ 效果 ------------------

@dataclass(frozen=True)
class Broadcast:
    msg: ProtocolMessage


@dataclass(frozen=True)
class RequestCoin:
    """请求第 round 轮的公共硬币；hint 是请求方当前倾向的值，供分裂策略参考"""
    round: int
    hint: Optional[int] = None


@dataclass(frozen=True)
class Decide:
    value: int
    round: int


@dataclass(frozen=True)
class BinValueAdded:
    """BV 实例的 bin_values 新增了一个值"""
    tag: StageTag
    value: int


@dataclass(frozen=True)
class ViewReady:
    """SBV 实例完成，view 已确定且不再变化"""
    tag: StageTag
    view: FrozenSet[int]


@dataclass(frozen=True)
class SvalueTrue:
    """S-Broadcast 实例 (tag, value) 的标志翻转为 true"""
    tag: EstTag
    value: int


Effect = Union[Broadcast, RequestCoin, Decide, BinValueAdded, ViewReady, SvalueTrue]


# ------------------ 输入事件 ------------------

@dataclass(frozen=True)
class Start:
    """本地触发：以 value 启动实例或提案"""
    value: int


@dataclass(frozen=True)
class Deliver:
    msg: ProtocolMessage


@dataclass(frozen=True)
class CoinValue:
    round: int
    value: int


Event = Union[Start, Deliver, CoinValue]


class StateMachine(Protocol):
    """所有协议状态的统一接口：原地处理一个事件并返回效果列表"""

    dropped: int

    def handle(self, event: Event) -> List[Effect]:
        ...


def step(state: StateMachine, event: Event) -> Tuple[StateMachine, List[Effect]]:
    """
    纯函数形式的状态转移

    复制一份状态再处理事件，原状态保持不变；相同 (state, event) 必然得到相同输出。
    """
    new_state = copy.deepcopy(state)
    effects = new_state.handle(event)
    return new_state, effects


class EarlyBuffer:
    """
    提前到达的消息缓存

    异步网络中 r+1 轮的消息可能在 r 轮期间到达；实例建立前先按键暂存，
    建立后按到达顺序释放。容量不设上限。
    """

    def __init__(self) -> None:
        self._held: Dict[Any, List[ProtocolMessage]] = {}

    def hold(self, key: Any, msg: ProtocolMessage) -> None:
        self._held.setdefault(key, []).append(msg)

    def release(self, key: Any) -> List[ProtocolMessage]:
        return self._held.pop(key, [])

    def discard_below(self, predicate) -> int:
        """丢弃满足条件的键，返回丢弃的消息数"""
        doomed = [k for k in self._held if predicate(k)]
        return sum(len(self._held.pop(k)) for k in doomed)

    def __len__(self) -> int:
        return sum(len(v) for v in self._held.values())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, EarlyBuffer) and self._held == other._held
