"""
BV-Broadcast

收到 t+1 个不同进程的 BVAL(v) 时回显一次，收到 2t+1 个时把 v 交付进 bin_values。
bin_values 只增不减，每次增长都会产生 BinValueAdded 通知，
上层 (SBV、weak 共识) 依靠通知重新评估自己的等待条件。
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Set, Tuple

from loguru import logger

from coinsensus.core.protocol_core import (
    BinValueAdded,
    Broadcast,
    Bval,
    Deliver,
    DuplicateInit,
    Effect,
    Event,
    ProtocolViolation,
    Start,
    StageTag,
    SystemParams,
    TagError,
    is_well_formed,
)
from coinsensus.core.common_utils import BOT, is_est_value


@dataclass
class BvState:
    """单个进程上一个 BV 实例的状态"""
    params: SystemParams
    pid: int
    tag: StageTag
    my_value: int | None = None
    started: bool = False
    senders_of: Dict[int, Set[int]] = field(default_factory=dict)
    echoed: Set[int] = field(default_factory=set)
    bin_values: List[int] = field(default_factory=list)  # 按交付顺序
    dropped: int = 0

    @property
    def bin_set(self) -> frozenset:
        return frozenset(self.bin_values)

    def start(self, value: int | None, broadcast: bool = True) -> List[Effect]:
        """
        启动实例

        Args:
            value: 本进程输入；broadcast=False 时可为 None
            broadcast: 是否广播自己的 BVAL (优化模式下可跳过)
        """
        if self.started:
            raise DuplicateInit(f"p{self.pid} 重复初始化 BV 实例 {self.tag}")
        if not isinstance(self.tag, StageTag):
            raise TagError(f"BV 实例只接受 Stage 标签: {self.tag!r}")
        self.started = True
        if not broadcast:
            return []
        if not is_est_value(value):
            raise ProtocolViolation("bv-input", f"非法输入 {value!r}")
        if self.tag.phase == 0 and value == BOT:
            raise ProtocolViolation("bv-input", "phase 0 实例的输入必须是二进制值")
        self.my_value = value
        self.echoed.add(value)
        return [Broadcast(Bval(self.tag, value, self.pid))]

    def on_bval(self, sender: int, value: int) -> List[Effect]:
        """处理一条来自 sender 的 BVAL(value)"""
        senders = self.senders_of.setdefault(value, set())
        if sender in senders:
            return []
        senders.add(sender)
        effects: List[Effect] = []
        if len(senders) >= self.params.t_plus_1 and value not in self.echoed:
            # 每个值只回显一次
            self.echoed.add(value)
            effects.append(Broadcast(Bval(self.tag, value, self.pid)))
        if len(senders) >= self.params.two_t_plus_1 and value not in self.bin_values:
            self.bin_values.append(value)
            effects.append(BinValueAdded(self.tag, value))
        return effects

    def handle(self, event: Event) -> List[Effect]:
        if isinstance(event, Start):
            return self.start(event.value)
        if isinstance(event, Deliver) and isinstance(event.msg, Bval):
            msg = event.msg
            if msg.tag != self.tag or not is_well_formed(msg, self.params):
                self.dropped += 1
                logger.debug(f"p{self.pid} 丢弃畸形或错投的 BVAL: {msg}")
                return []
            return self.on_bval(msg.sender, msg.value)
        self.dropped += 1
        return []

    def state_key(self, rename: Optional[Mapping[int, int]] = None) -> Tuple:
        """
        用于穷举检查去重的规范化键

        bin_values 只取集合：交付先后只影响 SBV 的 AUX 取值，那部分由 SBV 自己记录。
        rename 是进程编号的置换，对称归约时使用。
        """
        ren = rename or {}
        return (
            self.started,
            tuple(sorted(
                (v, tuple(sorted(ren.get(s, s) for s in senders))) for v, senders in self.senders_of.items()
            )),
            tuple(sorted(self.echoed)),
            tuple(sorted(self.bin_values)),
        )

    def clone(self) -> "BvState":
        """比 deepcopy 便宜的复制，穷举检查器每次转移都要用"""
        return replace(
            self,
            senders_of={v: set(s) for v, s in self.senders_of.items()},
            echoed=set(self.echoed),
            bin_values=list(self.bin_values),
        )


def bv_init(params: SystemParams, pid: int, tag: StageTag, value: int) -> Tuple[BvState, List[Effect]]:
    """
    创建并启动一个 BV 实例

    Returns:
        (BvState, effects): 初始 bin_values 为空，效果为 [Broadcast BVAL(tag, value)]

    Raises:
        TagError: 使用了 Est 标签
        ProtocolViolation: phase 0 实例输入 ⊥
    """
    state = BvState(params=params, pid=pid, tag=tag)
    effects = state.start(value)
    return state, effects


def bv_on_bval(state: BvState, sender: int, value: int) -> Tuple[BvState, List[Effect]]:
    """便捷函数：把一条 BVAL 交给实例，原地更新后返回"""
    effects = state.handle(Deliver(Bval(state.tag, value, sender)))
    return state, effects
