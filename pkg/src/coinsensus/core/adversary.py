"""
攻击者模型

- 调度器：决定下一条投递哪条在途消息 (网络由攻击者控制，但受公平性上限约束)
- 拜占庭策略：挂在模拟器上的消息生成器，不是状态机，可以对不同接收者发送不同内容
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from loguru import logger

from coinsensus.core.common_utils import (
    BYZ_CRASH,
    BYZ_EQUIVOCATE,
    BYZ_MIRROR,
    BYZ_MUTE,
    BYZ_SCRIPTED,
    SCHED_DELAY_TARGET,
    SCHED_FIFO,
    SCHED_LIFO,
    SCHED_RANDOM,
    is_binary,
    negate,
)
from coinsensus.core.protocol_core import (
    Aux,
    AuxBin,
    AuxSet,
    Bval,
    ConfigError,
    ProtocolMessage,
    Sval,
    SystemParams,
    message_from_json,
)


@dataclass
class PendingMessage:
    seq: int
    sender: int
    recipient: int
    msg: ProtocolMessage
    sent_at: int  # 入队时的累计投递次数
    queued_ahead: int = 0  # 入队时排在前面的在途消息数

    def overtaken(self, deliveries: int) -> int:
        """
        被更晚入队的消息抢先投递的次数

        只对最老的在途消息成立：此时入队时排在它前面的消息都已投递。
        """
        return deliveries - self.sent_at - self.queued_ahead


Injection = Tuple[int, ProtocolMessage]  # (接收者, 消息)


# ------------------ 调度器 ------------------

class Scheduler:
    """从在途消息中挑选下一条投递；pending 按入队顺序排列"""

    name = "base"

    def choose(self, pending: Dict[int, PendingMessage], coin_gate=None) -> int:
        raise NotImplementedError


class FifoScheduler(Scheduler):
    name = SCHED_FIFO

    def choose(self, pending, coin_gate=None) -> int:
        return next(iter(pending))


class LifoScheduler(Scheduler):
    name = SCHED_LIFO

    def choose(self, pending, coin_gate=None) -> int:
        return next(reversed(pending))


class RandomScheduler(Scheduler):
    name = SCHED_RANDOM

    def __init__(self, seed: int) -> None:
        self.rng = random.Random(f"sched:{seed}")

    def choose(self, pending, coin_gate=None) -> int:
        keys = list(pending)
        return keys[self.rng.randrange(len(keys))]


class DelayTargetScheduler(Scheduler):
    """尽量扣住目标进程发出的消息，直到公平性上限强制投递"""

    name = SCHED_DELAY_TARGET

    def __init__(self, targets: Iterable[int]) -> None:
        self.targets: Set[int] = set(targets)

    def choose(self, pending, coin_gate=None) -> int:
        for seq, item in pending.items():
            if item.sender not in self.targets:
                return seq
        return next(iter(pending))


def make_scheduler(name: str, seed: int, targets: Sequence[int] = (0,)) -> Scheduler:
    if name == SCHED_FIFO:
        return FifoScheduler()
    if name == SCHED_LIFO:
        return LifoScheduler()
    if name == SCHED_RANDOM:
        return RandomScheduler(seed)
    if name == SCHED_DELAY_TARGET:
        return DelayTargetScheduler(targets)
    raise ConfigError(f"未知调度器: {name}")


# ------------------ 拜占庭策略 ------------------

def _tag_key(msg: ProtocolMessage) -> Tuple[str, Any]:
    if isinstance(msg, (Bval, Aux, Sval)):
        return msg.kind, msg.tag
    return msg.kind, msg.round


def _with_value(msg: ProtocolMessage, value: int, sender: int) -> ProtocolMessage:
    """复制 msg 的类型与标签，替换取值与发送者"""
    if isinstance(msg, (Bval, Aux, Sval)):
        return type(msg)(msg.tag, value, sender)
    if isinstance(msg, AuxSet):
        return AuxSet(msg.round, frozenset({value}), sender)
    return AuxBin(msg.round, value, sender)


def _stamped(msg: ProtocolMessage, pid: int) -> ProtocolMessage:
    """接收方认得每条消息的真实来源：注入消息的发送者一律改写为 faulty 进程自己"""
    if msg.sender == pid:
        return msg
    logger.debug(f"p{pid} 注入的消息冒用了发送者 p{msg.sender}，已改写: {msg}")
    return replace(msg, sender=pid)


class ByzantineStrategy:
    """faulty 进程 pid 的行为；默认什么也不发"""

    name = "silent"

    def __init__(self, pid: int, params: SystemParams) -> None:
        self.pid = pid
        self.params = params
        self.recipients = sorted(params.non_faulty)

    def on_start(self) -> List[Injection]:
        return []

    def on_broadcast(self, sender: int, msg: ProtocolMessage) -> List[Injection]:
        return []


class CrashStrategy(ByzantineStrategy):
    name = BYZ_CRASH


class MuteStrategy(ByzantineStrategy):
    name = BYZ_MUTE


class EquivocateStrategy(ByzantineStrategy):
    """对每个 (类型, 标签) 只在首次观察到正确进程广播时行动：编号前一半收 0，后一半收 1"""

    name = BYZ_EQUIVOCATE

    def __init__(self, pid: int, params: SystemParams) -> None:
        super().__init__(pid, params)
        self.seen: Set[Tuple[str, Any]] = set()

    def on_broadcast(self, sender, msg):
        key = _tag_key(msg)
        if key in self.seen:
            return []
        self.seen.add(key)
        half = self.params.n // 2
        return [(p, _with_value(msg, 0 if p < half else 1, self.pid)) for p in self.recipients]


class MirrorStrategy(ByzantineStrategy):
    """把观察到的正确进程广播取反后发给所有正确进程，同一内容只发一次"""

    name = BYZ_MIRROR

    def __init__(self, pid: int, params: SystemParams) -> None:
        super().__init__(pid, params)
        self.sent: Set[Tuple[str, Any, Any]] = set()

    def on_broadcast(self, sender, msg):
        if isinstance(msg, AuxSet):
            mirrored = AuxSet(msg.round, frozenset(negate(v) for v in msg.values), self.pid)
            payload: Any = mirrored.values
        elif is_binary(msg.value):
            mirrored = _with_value(msg, negate(msg.value), self.pid)
            payload = mirrored.value
        else:
            return []
        key = (*_tag_key(msg), payload)
        if key in self.sent:
            return []
        self.sent.add(key)
        return [(p, mirrored) for p in self.recipients]


class ScriptedStrategy(ByzantineStrategy):
    """
    回放配置中的注入脚本

    脚本条目: {"from": pid, "to": [pid...] | null, "msg": {...消息编码...}}
    取值可以是任意内容 (包括空 AUXSET)，接收方会当作畸形消息丢弃。
    """

    name = BYZ_SCRIPTED

    def __init__(self, pid: int, params: SystemParams, script: Sequence[Dict[str, Any]] = ()) -> None:
        super().__init__(pid, params)
        self.script = [item for item in script if item.get("from", pid) == pid]

    def on_start(self):
        out: List[Injection] = []
        for item in self.script:
            raw = dict(item.get("msg", {}))
            raw.setdefault("sender", self.pid)
            msg = _stamped(message_from_json(raw), self.pid)
            targets = item.get("to") or self.recipients
            out.extend((p, msg) for p in targets if p in self.params.non_faulty)
        return out


_STRATEGIES = {
    BYZ_CRASH: CrashStrategy,
    BYZ_MUTE: MuteStrategy,
    BYZ_EQUIVOCATE: EquivocateStrategy,
    BYZ_MIRROR: MirrorStrategy,
}


def make_strategy(name: str, pid: int, params: SystemParams,
                  script: Optional[Sequence[Dict[str, Any]]] = None) -> ByzantineStrategy:
    if name == BYZ_SCRIPTED:
        return ScriptedStrategy(pid, params, script or ())
    try:
        return _STRATEGIES[name](pid, params)
    except KeyError:
        raise ConfigError(f"未知拜占庭策略: {name}") from None


def byzantine_start(strategy: ByzantineStrategy) -> List[Injection]:
    """运行开始时策略要注入的消息"""
    return [(p, _stamped(m, strategy.pid)) for p, m in strategy.on_start()]


def byzantine_emit(strategy: ByzantineStrategy, sender: int, msg: ProtocolMessage) -> List[Injection]:
    """观察到一条正确进程的广播后，策略要注入的消息"""
    return [(p, _stamped(m, strategy.pid)) for p, m in strategy.on_broadcast(sender, msg)]
