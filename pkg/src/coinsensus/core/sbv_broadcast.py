"""
SBV-Broadcast

先做一次 BV-Broadcast，bin_values 首次非空时广播一次 AUX(w)，
再从 n-t 个不同发送者的 AUX 中组装 view：view 中每个值都必须被
bin_values (或优化模式下的外部有效集合) 证明。

除 view 外，实例的 bin_values 对调用方持续可读，并随 BinValueAdded 通知增长。
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

from loguru import logger

from coinsensus.core.bv_broadcast import BvState
from coinsensus.core.common_utils import VIEW_FIRST_QUORUM, VIEW_UNION
from coinsensus.core.protocol_core import (
    Aux,
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
    ViewReady,
    is_well_formed,
)


@dataclass
class SbvState:
    """单个进程上一个 SBV 实例的状态"""
    bv: BvState
    view_selection: str = VIEW_UNION
    started: bool = False
    aux_sent: bool = False
    aux_received: Dict[int, int] = field(default_factory=dict)  # 发送者 -> 首条 AUX 的值
    completed: bool = False
    view: Optional[FrozenSet[int]] = None
    justification_extra: FrozenSet[int] = frozenset()
    dropped: int = 0

    @property
    def tag(self) -> StageTag:
        return self.bv.tag

    @property
    def params(self) -> SystemParams:
        return self.bv.params

    @property
    def pid(self) -> int:
        return self.bv.pid

    @property
    def bin_values(self) -> FrozenSet[int]:
        return self.bv.bin_set

    def justified(self) -> FrozenSet[int]:
        """能为 AUX 值提供证明的集合：bin_values ∪ 外部有效集合"""
        return self.bv.bin_set | self.justification_extra

    # ------------------ 启动 ------------------

    def start(self, value: int, skip_bval: bool = False) -> List[Effect]:
        if self.started:
            raise DuplicateInit(f"p{self.pid} 重复初始化 SBV 实例 {self.tag}")
        self.started = True
        if not skip_bval:
            effects = self._absorb(self.bv.start(value))
            effects.extend(self._send_aux_from_extra())
            return effects
        # 优化路径：不广播 BVAL，直接在 AUX 中广播该值
        self.bv.start(None, broadcast=False)
        self.aux_sent = True
        effects: List[Effect] = [Broadcast(Aux(self.tag, value, self.pid))]
        effects.extend(self._check_complete())
        return effects

    # ------------------ 事件处理 ------------------

    def on_binvalue_added(self, value: int) -> List[Effect]:
        """bin_values 新增 value 后：若尚未发送 AUX 则发送，然后重新检查完成条件"""
        effects: List[Effect] = []
        if not self.aux_sent:
            self.aux_sent = True
            effects.append(Broadcast(Aux(self.tag, value, self.pid)))
        effects.extend(self._check_complete())
        return effects

    def on_aux(self, sender: int, value: int) -> List[Effect]:
        if sender in self.aux_received:
            return []
        self.aux_received[sender] = value
        return self._check_complete()

    def extend_justification(self, values: Iterable[int]) -> List[Effect]:
        """扩大外部有效集合，并重新检查完成条件"""
        extra = frozenset(values)
        if extra <= self.justification_extra:
            return []
        self.justification_extra = self.justification_extra | extra
        effects = self._send_aux_from_extra()
        effects.extend(self._check_complete())
        return effects

    def _send_aux_from_extra(self) -> List[Effect]:
        """
        bin_values 仍为空时，用外部集合中的值 (二进制优先) 完成 AUX 广播

        优化模式下其他进程可能全都跳过了 BVAL，本实例的 bin_values 可能永远为空。
        """
        if self.aux_sent or self.bv.bin_values:
            return []
        candidates = sorted(self.justification_extra)
        if not candidates:
            return []
        self.aux_sent = True
        return [Broadcast(Aux(self.tag, candidates[0], self.pid))]

    def handle(self, event: Event) -> List[Effect]:
        if isinstance(event, Start):
            return self.start(event.value)
        if isinstance(event, Deliver):
            msg = event.msg
            if isinstance(msg, Bval):
                before = self.bv.dropped
                effects = self.bv.handle(event)
                self.dropped += self.bv.dropped - before
                return self._absorb(effects)
            if isinstance(msg, Aux):
                if msg.tag != self.tag or not is_well_formed(msg, self.params):
                    self.dropped += 1
                    logger.debug(f"p{self.pid} 丢弃畸形或错投的 AUX: {msg}")
                    return []
                return self.on_aux(msg.sender, msg.value)
        self.dropped += 1
        return []

    # ------------------ 内部 ------------------

    def _absorb(self, bv_effects: List[Effect]) -> List[Effect]:
        """转发 BV 层效果，并在 bin_values 增长时触发 SBV 自身逻辑"""
        out: List[Effect] = []
        for effect in bv_effects:
            out.append(effect)
            if isinstance(effect, BinValueAdded):
                out.extend(self.on_binvalue_added(effect.value))
        return out

    def _check_complete(self) -> List[Effect]:
        if self.completed or not self.aux_sent:
            return []
        justified = self.justified()
        valid = [(s, w) for s, w in self.aux_received.items() if w in justified]
        if len(valid) < self.params.n_minus_t:
            return []
        if self.view_selection == VIEW_FIRST_QUORUM:
            chosen = valid[: self.params.n_minus_t]
        else:
            chosen = valid
        self.view = frozenset(w for _, w in chosen)
        self.completed = True
        if not self.view:
            raise ProtocolViolation("sbv-obligation", f"{self.tag} 的 view 为空")
        return [ViewReady(self.tag, self.view)]

    def state_key(self, rename: Optional[Mapping[int, int]] = None) -> Tuple:
        """
        用于穷举检查去重的规范化键

        完成后 aux_received 不再影响行为，键里只保留视图；
        first-quorum 模式下收到 AUX 的先后决定视图，此时保留插入顺序。
        """
        ren = rename or {}
        aux = [(ren.get(s, s), v) for s, v in self.aux_received.items()]
        if self.view_selection != VIEW_FIRST_QUORUM:
            aux.sort()
        return (
            self.bv.state_key(rename),
            self.started,
            self.aux_sent,
            self.completed,
            tuple(sorted(self.view)) if self.view is not None else (),
            () if self.completed else tuple(aux),
            tuple(sorted(self.justification_extra)),
        )

    def clone(self) -> "SbvState":
        return replace(self, bv=self.bv.clone(), aux_received=dict(self.aux_received))


def sbv_init(
    params: SystemParams,
    pid: int,
    tag: StageTag,
    value: int,
    skip_bval: bool = False,
    justification_extra: Iterable[int] = (),
    view_selection: str = VIEW_UNION,
) -> Tuple[SbvState, List[Effect]]:
    """
    创建并启动一个 SBV 实例

    Args:
        skip_bval: True 时不广播 BVAL，直接广播 AUX(value)
        justification_extra: 外部有效集合 (仅优化模式使用)
        view_selection: "union" 或 "first-quorum"

    Returns:
        (SbvState, effects)
    """
    state = SbvState(
        bv=BvState(params=params, pid=pid, tag=tag),
        view_selection=view_selection,
        justification_extra=frozenset(justification_extra),
    )
    effects = state.start(value, skip_bval=skip_bval)
    return state, effects


def sbv_on_binvalue_added(state: SbvState, value: int) -> Tuple[SbvState, List[Effect]]:
    return state, state.on_binvalue_added(value)


def sbv_on_aux(state: SbvState, sender: int, value: int) -> Tuple[SbvState, List[Effect]]:
    effects = state.handle(Deliver(Aux(state.tag, value, sender)))
    return state, effects


def sbv_extend_justification(state: SbvState, values: Iterable[int]) -> Tuple[SbvState, List[Effect]]:
    return state, state.extend_justification(values)


def sbv_justified(state: SbvState) -> FrozenSet[int]:
    return state.justified()
