"""
weak 公共硬币共识

每一轮：
1. SBV stage[r,0] 输入 est，得到 view0，广播 AUXSET(r, view0)
2. 收到 n-t 个被 stage[r,0] 证明的 AUXSET 后得到 view[r,1]：单值 {w} 时 est=w，否则 est=⊥
3. SBV stage[r,1] 输入 est，得到 view2 后请求硬币 s
4. view2={v} 决定 v；{v,⊥} 采纳 v；{⊥} 采纳 s；进入下一轮

优化模式 (weak-opt) 在第 2 轮起跳过可以由上一阶段 bin_values 证明的 BVAL 广播。
进程决定后继续参与后续轮次，何时整体停止由模拟器决定。
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, FrozenSet, List, Optional, Tuple

from loguru import logger

from coinsensus.core.common_utils import (
    ALGO_WEAK,
    ALGO_WEAK_OPT,
    BINARY_VALUES,
    BOT,
    VIEW_FIRST_QUORUM,
    VIEW_UNION,
    is_binary,
)
from coinsensus.core.protocol_core import (
    Aux,
    AuxSet,
    BinValueAdded,
    Broadcast,
    Bval,
    CoinValue,
    Decide,
    Deliver,
    DuplicateProposal,
    EarlyBuffer,
    Effect,
    Event,
    ProtocolViolation,
    RequestCoin,
    StageTag,
    Start,
    SystemParams,
    ViewReady,
    is_well_formed,
)
from coinsensus.core.sbv_broadcast import SbvState, sbv_init

_BOTH = frozenset(BINARY_VALUES)


@dataclass
class WeakConsensus:
    """单个正确进程上的 weak 共识状态机"""
    params: SystemParams
    pid: int
    mode: str = ALGO_WEAK
    view_selection: str = VIEW_UNION
    proposal: Optional[int] = None
    r: int = 0
    est: Optional[int] = None
    decided: Optional[Tuple[int, int]] = None  # (value, round)
    stages: Dict[StageTag, SbvState] = field(default_factory=dict)
    auxset_received: Dict[int, Dict[int, FrozenSet[int]]] = field(default_factory=dict)
    views: Dict[Tuple[int, int], FrozenSet[int]] = field(default_factory=dict)  # (r, k)，k=0/1/2
    round_start_est: Dict[int, int] = field(default_factory=dict)
    phase1_inputs: Dict[int, int] = field(default_factory=dict)
    coin_values: Dict[int, int] = field(default_factory=dict)
    completed_rounds: int = 0
    buffer: EarlyBuffer = field(default_factory=EarlyBuffer)
    dropped: int = 0

    @property
    def optimized(self) -> bool:
        return self.mode == ALGO_WEAK_OPT

    # ------------------ 入口 ------------------

    def propose(self, value: int) -> List[Effect]:
        if self.proposal is not None:
            raise DuplicateProposal(f"p{self.pid} 重复提案")
        if not is_binary(value):
            raise ProtocolViolation("binary-proposal", f"p{self.pid} 的提案不是二进制值: {value!r}")
        self.proposal = value
        self.est = value
        return self._drain(self._start_round())

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
            if isinstance(msg, (Bval, Aux)):
                return self._drain(self._deliver_stage(msg))
            if isinstance(msg, AuxSet):
                return self._drain(self.on_auxset(msg.sender, msg.round, msg.values))
        self.dropped += 1
        return []

    # ------------------ 各步骤 ------------------

    def on_view0(self, r: int, view0: FrozenSet[int]) -> List[Effect]:
        """stage[r,0] 完成：广播 AUXSET(r, view0)，随后尝试计算 view[r,1]"""
        if not view0:
            raise ProtocolViolation("sbv-obligation", f"p{self.pid} stage[{r},0] 的 view 为空")
        self.views[(r, 0)] = view0
        effects: List[Effect] = [Broadcast(AuxSet(r, view0, self.pid))]
        effects.extend(self._check_auxsets(r))
        return effects

    def on_auxset(self, sender: int, r: int, values: FrozenSet[int]) -> List[Effect]:
        received = self.auxset_received.setdefault(r, {})
        if sender in received:
            return []
        received[sender] = frozenset(values)
        return self._check_auxsets(r)

    def on_view2_and_coin(self, r: int, view2: FrozenSet[int], s: int) -> List[Effect]:
        """stage[r,1] 的 view 与第 r 轮硬币都就绪：决定或采纳，然后进入下一轮"""
        binaries = view2 - {BOT}
        if len(binaries) > 1:
            raise ProtocolViolation("one-sided-phase1", f"p{self.pid} 第 {r} 轮 view2={sorted(view2)}")
        effects: List[Effect] = []
        if binaries:
            (v,) = binaries
            self.est = v
            if BOT not in view2 and self.decided is None:
                self.decided = (v, r)
                effects.append(Decide(v, r))
                logger.debug(f"p{self.pid} 在第 {r} 轮决定 {v}")
        elif view2 == {BOT}:
            self.est = s
        else:
            raise ProtocolViolation("sbv-obligation", f"p{self.pid} 第 {r} 轮 view2 为空")
        self.completed_rounds = r
        effects.extend(self._start_round())
        return effects

    # ------------------ 内部 ------------------

    def _start_round(self) -> List[Effect]:
        self.r += 1
        r = self.r
        if not is_binary(self.est):
            raise ProtocolViolation("binary-estimate", f"p{self.pid} 第 {r} 轮开始时 est={self.est!r}")
        self.round_start_est[r] = self.est
        skip, extra = False, frozenset()
        if self.optimized and r >= 2:
            prev = self.stages[StageTag(r - 1, 1)]
            skip = self.est in prev.bin_values
            extra = prev.bin_values & _BOTH
        return self._init_stage(StageTag(r, 0), self.est, skip, extra)

    def _init_stage(self, tag: StageTag, value: int, skip: bool, extra: FrozenSet[int]) -> List[Effect]:
        state, effects = sbv_init(
            self.params, self.pid, tag, value,
            skip_bval=skip, justification_extra=extra, view_selection=self.view_selection,
        )
        self.stages[tag] = state
        for msg in self.buffer.release(tag):
            effects.extend(self._deliver_to(state, msg))
        return effects

    def _deliver_stage(self, msg) -> List[Effect]:
        state = self.stages.get(msg.tag)
        if state is not None:
            return self._deliver_to(state, msg)
        if msg.tag.round >= self.r:
            self.buffer.hold(msg.tag, msg)
        else:
            self.dropped += 1
        return []

    def _deliver_to(self, state: SbvState, msg) -> List[Effect]:
        before = state.dropped
        effects = state.handle(Deliver(msg))
        self.dropped += state.dropped - before
        return effects

    def _check_auxsets(self, r: int) -> List[Effect]:
        if r != self.r or (r, 0) not in self.views or (r, 1) in self.views:
            return []
        justified = self.stages[StageTag(r, 0)].justified()
        valid = [vals for vals in self.auxset_received.get(r, {}).values() if vals <= justified]
        if len(valid) < self.params.n_minus_t:
            return []
        if self.view_selection == VIEW_FIRST_QUORUM:
            valid = valid[: self.params.n_minus_t]
        view1 = frozenset().union(*valid)
        self.views[(r, 1)] = view1
        self.est = next(iter(view1)) if len(view1) == 1 else BOT
        self.phase1_inputs[r] = self.est
        skip, extra = False, frozenset()
        if self.optimized and _BOTH <= justified:
            extra = frozenset({BOT})
            skip = self.est == BOT
        return self._init_stage(StageTag(r, 1), self.est, skip, extra)

    def _on_bin_value_added(self, tag: StageTag, value: int) -> List[Effect]:
        effects: List[Effect] = []
        if tag.phase == 0:
            effects.extend(self._check_auxsets(tag.round))
            if self.optimized:
                stage1 = self.stages.get(StageTag(tag.round, 1))
                if stage1 is not None and _BOTH <= self.stages[tag].justified():
                    effects.extend(stage1.extend_justification({BOT}))
        elif self.optimized and is_binary(value):
            nxt = self.stages.get(StageTag(tag.round + 1, 0))
            if nxt is not None:
                effects.extend(nxt.extend_justification({value}))
                # 下一轮 stage0 的外部集合变大后，stage[r+1,1] 的 ⊥ 证明条件也可能成立
                stage1 = self.stages.get(StageTag(tag.round + 1, 1))
                if stage1 is not None and _BOTH <= nxt.justified():
                    effects.extend(stage1.extend_justification({BOT}))
            effects.extend(self._check_auxsets(tag.round + 1))
        return effects

    def _on_view_ready(self, tag: StageTag, view: FrozenSet[int]) -> List[Effect]:
        if tag.phase == 0:
            return self.on_view0(tag.round, view)
        self.views[(tag.round, 2)] = view
        binaries = view - {BOT}
        hint = next(iter(binaries)) if len(binaries) == 1 else None
        effects: List[Effect] = [RequestCoin(tag.round, hint)]
        effects.extend(self._try_finish_round(tag.round))
        return effects

    def _try_finish_round(self, r: int) -> List[Effect]:
        if r != self.r or (r, 2) not in self.views or r not in self.coin_values:
            return []
        return self.on_view2_and_coin(r, self.views[(r, 2)], self.coin_values[r])

    def _drain(self, effects: List[Effect]) -> List[Effect]:
        """把内部通知逐个消化掉，只向外返回 Broadcast / RequestCoin / Decide"""
        work: Deque[Effect] = deque(effects)
        out: List[Effect] = []
        while work:
            effect = work.popleft()
            if isinstance(effect, BinValueAdded):
                work.extend(self._on_bin_value_added(effect.tag, effect.value))
            elif isinstance(effect, ViewReady):
                work.extend(self._on_view_ready(effect.tag, effect.view))
            else:
                out.append(effect)
        return out


def w_propose(params: SystemParams, pid: int, value: int, mode: str = ALGO_WEAK,
              view_selection: str = VIEW_UNION) -> Tuple[WeakConsensus, List[Effect]]:
    """创建进程 pid 的 weak 共识实例并提案 value"""
    state = WeakConsensus(params=params, pid=pid, mode=mode, view_selection=view_selection)
    effects = state.propose(value)
    return state, effects


def w_on_auxset(state: WeakConsensus, sender: int, r: int, values) -> Tuple[WeakConsensus, List[Effect]]:
    effects = state.handle(Deliver(AuxSet(r, frozenset(values), sender)))
    return state, effects


def w_on_coin(state: WeakConsensus, r: int, s: int) -> Tuple[WeakConsensus, List[Effect]]:
    effects = state.handle(CoinValue(r, s))
    return state, effects
