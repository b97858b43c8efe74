"""
strong (t+1) 公共硬币共识

每个值一个跨轮持久的布尔标志 binptr[v]，来自 S-Broadcast。
每轮只为上一轮硬币的取反值 ¬s 新开一个 S-Broadcast 实例，binptr[s] 保持不变；
任一标志为 true 后广播一次 AUX(r, w)，收齐 n-t 个有效 AUX 得到 view，
再用硬币 s 决定：只有 view={s} 时才决定，且只决定硬币的值。
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, FrozenSet, List, Optional, Tuple

from loguru import logger

from coinsensus.core.common_utils import BINARY_VALUES, VIEW_FIRST_QUORUM, VIEW_UNION, is_binary, negate
from coinsensus.core.protocol_core import (
    AuxBin,
    Broadcast,
    CoinValue,
    Decide,
    Deliver,
    DuplicateProposal,
    EarlyBuffer,
    Effect,
    EstTag,
    Event,
    ProtocolViolation,
    RequestCoin,
    Start,
    Sval,
    SvalueTrue,
    SystemParams,
    is_well_formed,
)
from coinsensus.core.s_broadcast import FlagHandle, SbcState, s_init

_BOTH = frozenset(BINARY_VALUES)


@dataclass
class StrongConsensus:
    """单个正确进程上的 strong 共识状态机"""
    params: SystemParams
    pid: int
    view_selection: str = VIEW_UNION
    proposal: Optional[int] = None
    r: int = 0
    s: Optional[int] = None
    support_coin: bool = False
    decided: Optional[Tuple[int, int]] = None
    instances: Dict[Tuple[EstTag, int], SbcState] = field(default_factory=dict)
    binptr: Dict[int, FlagHandle] = field(default_factory=dict)
    sbroadcast_values: Dict[int, Tuple[int, bool]] = field(default_factory=dict)  # 轮次 -> (值, 是否广播)
    aux_sent: Dict[int, int] = field(default_factory=dict)
    aux_received: Dict[int, Dict[int, int]] = field(default_factory=dict)
    views: Dict[int, FrozenSet[int]] = field(default_factory=dict)
    coin_values: Dict[int, int] = field(default_factory=dict)
    completed_rounds: int = 0
    buffer: EarlyBuffer = field(default_factory=EarlyBuffer)
    dropped: int = 0

    # ------------------ 入口 ------------------

    def propose(self, value: int) -> List[Effect]:
        if self.proposal is not None:
            raise DuplicateProposal(f"p{self.pid} 重复提案")
        if not is_binary(value):
            raise ProtocolViolation("binary-proposal", f"p{self.pid} 的提案不是二进制值: {value!r}")
        self.proposal = value
        self.s = negate(value)
        self.support_coin = False
        # binptr[¬v] 指向第 1 轮静默实例
        effects = self._bind(EstTag(1), negate(value), should_broadcast=False)
        effects.extend(self.round_start())
        return self._drain(effects)

    def handle(self, event: Event) -> List[Effect]:
        if isinstance(event, Start):
            return self.propose(event.value)
        if isinstance(event, CoinValue):
            self.coin_values.setdefault(event.round, event.value)
            return self._drain(self._try_finish_round(event.round))
        if isinstance(event, Deliver):
            msg = event.msg
            if not is_well_formed(msg, self.params):
                self.dropped += 1
                logger.debug(f"p{self.pid} 丢弃畸形消息: {msg}")
                return []
            if isinstance(msg, Sval):
                return self._drain(self._deliver_sval(msg))
            if isinstance(msg, AuxBin):
                return self._drain(self.on_aux(msg.sender, msg.round, msg.value))
        self.dropped += 1
        return []

    # ------------------ 各步骤 ------------------

    def round_start(self) -> List[Effect]:
        """r += 1；binptr[¬s] 重新绑定到新实例 est[r]，binptr[s] 沿用旧标志"""
        self.r += 1
        r = self.r
        value = negate(self.s)
        should = not self.support_coin
        self.sbroadcast_values[r] = (value, should)
        effects = self._bind(EstTag(r), value, should_broadcast=should)
        # 本轮另一个值永远不会建实例，缓存的消息直接丢弃
        self.dropped += self.buffer.discard_below(lambda key: key[0].round <= r)
        effects.extend(self.evaluate())
        return effects

    def on_aux(self, sender: int, r: int, value: int) -> List[Effect]:
        received = self.aux_received.setdefault(r, {})
        if sender in received:
            return []
        received[sender] = value
        return self.evaluate() if r == self.r else []

    def evaluate(self) -> List[Effect]:
        """等待条件的重新评估：首个标志为 true 时广播 AUX，有效 AUX 达到 n-t 时得到 view"""
        r = self.r
        effects: List[Effect] = []
        if r not in self.aux_sent:
            if not (self._flag(0) or self._flag(1)):
                return effects
            if self.support_coin:
                w = self.s
            elif self._flag(0):
                w = 0
            else:
                w = 1
            self.aux_sent[r] = w
            effects.append(Broadcast(AuxBin(r, w, self.pid)))
        if r in self.views:
            return effects
        valid = [w for w in self.aux_received.get(r, {}).values() if self._flag(w)]
        if len(valid) < self.params.n_minus_t:
            return effects
        if self.view_selection == VIEW_FIRST_QUORUM:
            valid = valid[: self.params.n_minus_t]
        self.views[r] = frozenset(valid)
        effects.append(RequestCoin(r))
        effects.extend(self._try_finish_round(r))
        return effects

    def on_coin(self, r: int, s_new: int) -> List[Effect]:
        view = self.views[r]
        if not view:
            raise ProtocolViolation("strong-view", f"p{self.pid} 第 {r} 轮 view 为空")
        self.s = s_new
        effects: List[Effect] = []
        if view == {s_new}:
            self.support_coin = True
            if self.decided is None:
                self.decided = (s_new, r)
                effects.append(Decide(s_new, r))
                logger.debug(f"p{self.pid} 在第 {r} 轮决定 {s_new}")
        elif view == _BOTH:
            self.support_coin = True
        else:
            self.support_coin = False
        self.completed_rounds = r
        effects.extend(self.round_start())
        return effects

    # ------------------ 内部 ------------------

    def _flag(self, value: int) -> bool:
        handle = self.binptr.get(value)
        return handle is not None and handle.value

    def _bind(self, tag: EstTag, value: int, should_broadcast: bool) -> List[Effect]:
        state, effects, handle = s_init(self.params, self.pid, tag, value, should_broadcast)
        self.instances[(tag, value)] = state
        self.binptr[value] = handle
        for msg in self.buffer.release((tag, value)):
            effects.extend(self._deliver_to(state, msg))
        return effects

    def _deliver_sval(self, msg: Sval) -> List[Effect]:
        key = (msg.tag, msg.value)
        state = self.instances.get(key)
        if state is not None:
            return self._deliver_to(state, msg)
        if msg.tag.round > self.r:
            self.buffer.hold(key, msg)
        else:
            self.dropped += 1
        return []

    def _deliver_to(self, state: SbcState, msg: Sval) -> List[Effect]:
        before = state.dropped
        effects = state.handle(Deliver(msg))
        self.dropped += state.dropped - before
        return effects

    def _try_finish_round(self, r: int) -> List[Effect]:
        if r != self.r or r not in self.views or r not in self.coin_values:
            return []
        return self.on_coin(r, self.coin_values[r])

    def _drain(self, effects: List[Effect]) -> List[Effect]:
        work: Deque[Effect] = deque(effects)
        out: List[Effect] = []
        while work:
            effect = work.popleft()
            if isinstance(effect, SvalueTrue):
                work.extend(self.evaluate())
            else:
                out.append(effect)
        return out

    def flags(self) -> Dict[int, bool]:
        return {v: self._flag(v) for v in BINARY_VALUES}


def st_propose(params: SystemParams, pid: int, value: int,
               view_selection: str = VIEW_UNION) -> Tuple[StrongConsensus, List[Effect]]:
    state = StrongConsensus(params=params, pid=pid, view_selection=view_selection)
    effects = state.propose(value)
    return state, effects


def st_on_coin(state: StrongConsensus, r: int, s: int) -> Tuple[StrongConsensus, List[Effect]]:
    effects = state.handle(CoinValue(r, s))
    return state, effects
