"""
S-Broadcast

单值版本的 BV-Broadcast：每个 (标签, 值) 一个实例，输出是一个只增不减的布尔标志。
t+1 个不同发送者时回显一次，2t+1 个时标志翻转为 true。
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Mapping, Optional, Set, Tuple

from loguru import logger

from coinsensus.core.protocol_core import (
    Broadcast,
    Deliver,
    DuplicateInit,
    Effect,
    EstTag,
    Event,
    ProtocolViolation,
    Start,
    Sval,
    SvalueTrue,
    SystemParams,
    TagError,
    is_well_formed,
)
from coinsensus.core.common_utils import is_binary


@dataclass
class SbcState:
    """单个进程上一个 S-Broadcast 实例 (tag, watched_value) 的状态"""
    params: SystemParams
    pid: int
    tag: EstTag
    watched_value: int
    started: bool = False
    senders: Set[int] = field(default_factory=set)
    broadcast_done: bool = False
    svalue: bool = False
    dropped: int = 0

    def start(self, should_broadcast: bool) -> List[Effect]:
        if self.started:
            raise DuplicateInit(f"p{self.pid} 重复初始化 S 实例 {self.tag}/{self.watched_value}")
        if not isinstance(self.tag, EstTag):
            raise TagError(f"S-Broadcast 只接受 Est 标签: {self.tag!r}")
        if not is_binary(self.watched_value):
            raise ProtocolViolation("s-input", f"非法输入 {self.watched_value!r}")
        self.started = True
        if not should_broadcast:
            return []
        self.broadcast_done = True
        return [Broadcast(Sval(self.tag, self.watched_value, self.pid))]

    def on_sval(self, sender: int, value: int) -> List[Effect]:
        if value != self.watched_value:
            self.dropped += 1
            return []
        if sender in self.senders:
            return []
        self.senders.add(sender)
        effects: List[Effect] = []
        if len(self.senders) >= self.params.t_plus_1 and not self.broadcast_done:
            self.broadcast_done = True
            effects.append(Broadcast(Sval(self.tag, value, self.pid)))
        if len(self.senders) >= self.params.two_t_plus_1 and not self.svalue:
            self.svalue = True
            effects.append(SvalueTrue(self.tag, value))
        return effects

    def handle(self, event: Event) -> List[Effect]:
        if isinstance(event, Start):
            return self.start(bool(event.value))
        if isinstance(event, Deliver) and isinstance(event.msg, Sval):
            msg = event.msg
            if msg.tag != self.tag or not is_well_formed(msg, self.params):
                self.dropped += 1
                logger.debug(f"p{self.pid} 丢弃畸形或错投的 SVAL: {msg}")
                return []
            return self.on_sval(msg.sender, msg.value)
        self.dropped += 1
        return []

    def state_key(self, rename: Optional[Mapping[int, int]] = None) -> Tuple:
        ren = rename or {}
        return (self.started, tuple(sorted(ren.get(s, s) for s in self.senders)), self.broadcast_done, self.svalue)

    def clone(self) -> "SbcState":
        return replace(self, senders=set(self.senders))


class FlagHandle:
    """svalue 的只读视图：共识层只能读取，只有 S 实例自身能翻转它"""

    __slots__ = ("_state",)

    def __init__(self, state: SbcState) -> None:
        self._state = state

    @property
    def value(self) -> bool:
        return self._state.svalue

    @property
    def tag(self) -> EstTag:
        return self._state.tag

    def __bool__(self) -> bool:
        return self._state.svalue

    def __repr__(self) -> str:
        return f"FlagHandle({self._state.tag}, v={self._state.watched_value}, {self._state.svalue})"


def s_init(
    params: SystemParams, pid: int, tag: EstTag, value: int, should_broadcast: bool
) -> Tuple[SbcState, List[Effect], FlagHandle]:
    """
    创建并启动一个 S-Broadcast 实例

    Returns:
        (SbcState, effects, FlagHandle): 返回时标志不一定已是最终值
    """
    state = SbcState(params=params, pid=pid, tag=tag, watched_value=value)
    effects = state.start(should_broadcast)
    return state, effects, FlagHandle(state)


def s_on_sval(state: SbcState, sender: int, value: int) -> Tuple[SbcState, List[Effect]]:
    effects = state.handle(Deliver(Sval(state.tag, value, sender)))
    return state, effects
