"""
小模型穷举检查器

固定 n=4, t=1：p0..p2 为正确进程，p3 为拜占庭进程 (开始时一次性注入消息)。
对单个抽象实例 (BV / SBV / S-Broadcast) 枚举所有投递交错，
以全局状态 (各进程状态键 + 在途消息多重集) 去重，在终止状态上检查各性质。

两种归约 (reduction=True 时启用)：
- 对称：输入与注入消息都相同的正确进程可以互换编号，只探索置换后最小的那个全局状态；
- 偏序：发给不同进程的投递总是可交换；若某条在途投递与之后发给同一进程的任何投递都可交换，
  只沿它展开。终止状态集合因此不变 (状态图无环，每次投递都消耗一条在途消息)。
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from itertools import permutations
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

from loguru import logger

from coinsensus.core.bv_broadcast import BvState, bv_init
from coinsensus.core.common_utils import BINARY_VALUES
from coinsensus.core.protocol_core import (
    Aux,
    Broadcast,
    Bval,
    ConfigError,
    Deliver,
    EstTag,
    ProtocolMessage,
    StageTag,
    Sval,
    SystemParams,
    validate_params,
)
from coinsensus.core.s_broadcast import SbcState, s_init
from coinsensus.core.sbv_broadcast import SbvState, sbv_init

TARGET_BV = "bv"
TARGET_SBV = "sbv"
TARGET_SBC = "sbc"
TARGETS = (TARGET_BV, TARGET_SBV, TARGET_SBC)

BYZ_NONE = "none"
BYZ_EQUIVOCATE = "equivocate"
BYZ_FLOOD = "flood"
CHECK_BYZANTINE = (BYZ_NONE, BYZ_EQUIVOCATE, BYZ_FLOOD)

BV_PROPERTIES = ("BV-Justification", "BV-Obligation", "BV-Uniformity", "BV-Termination", "BV-Single-value")
SBV_PROPERTIES = (
    "SBV-Termination", "SBV-Obligation", "SBV-Justification", "SBV-Inclusion",
    "SBV-Uniformity", "SBV-Singleton", "SBV-Binvalues",
)
S_PROPERTIES = ("S-Justification", "S-Obligation", "S-Uniformity", "S-Termination")
MONOTONICITY = "Monotonicity"

_BYZ = 3
_STAGE = StageTag(1, 0)
_EST = EstTag(1)

Pending = Counter  # (recipient, msg) -> 个数
Injection = Tuple[int, ProtocolMessage]


class SbcPair:
    """一个正确进程上对值 0 与 1 各一个 S-Broadcast 实例"""

    def __init__(self, instances: Dict[int, SbcState]) -> None:
        self.instances = instances
        self.dropped = 0

    def handle(self, event):
        msg = event.msg
        inst = self.instances.get(msg.value) if isinstance(msg, Sval) else None
        if inst is None:
            self.dropped += 1
            return []
        return inst.handle(event)

    def svalue(self, v: int) -> bool:
        return self.instances[v].svalue

    def state_key(self, rename=None):
        return tuple(self.instances[v].state_key(rename) for v in BINARY_VALUES)

    def clone(self) -> "SbcPair":
        pair = SbcPair({v: inst.clone() for v, inst in self.instances.items()})
        pair.dropped = self.dropped
        return pair


@dataclass
class CheckReport:
    target: str
    byzantine: str
    inputs: Dict[str, List[int]]
    explored: int = 0
    terminal: int = 0
    truncated: bool = False
    reduction: bool = True
    symmetry: int = 1  # 实际使用的置换个数
    properties: Dict[str, Dict[str, int]] = field(default_factory=dict)
    failed: Optional[str] = None
    counterexample: Optional[List[str]] = None

    @property
    def ok(self) -> bool:
        return self.failed is None and not self.truncated

    def to_json(self) -> Dict[str, object]:
        return {
            "target": self.target,
            "byzantine": self.byzantine,
            "inputs": self.inputs,
            "explored": self.explored,
            "terminal": self.terminal,
            "truncated": self.truncated,
            "reduction": self.reduction,
            "symmetry": self.symmetry,
            "properties": self.properties,
            "ok": self.ok,
            "failed": self.failed,
            "counterexample": self.counterexample,
        }


# ------------------ 各目标的初始化 ------------------

def _byzantine_messages(target: str, byz: str, honest: Sequence[int]) -> List[Injection]:
    if byz == BYZ_NONE:
        return []
    out: List[Injection] = []
    for pid in honest:
        values = (pid % 2,) if byz == BYZ_EQUIVOCATE else BINARY_VALUES
        for v in values:
            if target == TARGET_SBC:
                out.append((pid, Sval(_EST, v, _BYZ)))
            else:
                out.append((pid, Bval(_STAGE, v, _BYZ)))
                if target == TARGET_SBV:
                    out.append((pid, Aux(_STAGE, v, _BYZ)))
    return out


def _init_states(target: str, params: SystemParams, honest: Sequence[int],
                 inputs: Sequence[int], sbc_calls: Dict[int, Tuple[int, bool]]):
    states: Dict[int, object] = {}
    effects: List[Tuple[int, object]] = []
    for i, pid in enumerate(honest):
        if target == TARGET_BV:
            state, eff = bv_init(params, pid, _STAGE, inputs[i])
        elif target == TARGET_SBV:
            state, eff = sbv_init(params, pid, _STAGE, inputs[i])
        else:
            called, should = sbc_calls.get(pid, (None, False))
            instances: Dict[int, SbcState] = {}
            eff = []
            for v in BINARY_VALUES:
                inst, e, _ = s_init(params, pid, _EST, v, should and v == called)
                instances[v] = inst
                eff.extend(e)
            state = SbcPair(instances)
        states[pid] = state
        effects.extend((pid, e) for e in eff)
    return states, effects


# ------------------ 归约 ------------------

def symmetry_group(honest: Sequence[int], signature: Dict[int, object]) -> List[Dict[int, int]]:
    """
    保持签名不变的正确进程置换 (拜占庭进程固定)

    签名相同的两个进程在初始状态下只差一个编号，交换它们得到的全局状态与原状态行为一致。
    """
    group = []
    for image in permutations(honest):
        perm = dict(zip(honest, image))
        if all(signature[q] == signature[perm[q]] for q in honest):
            perm[_BYZ] = _BYZ
            group.append(perm)
    return group


class DeliveryOrder:
    """
    判断哪些在途投递可以单独展开

    对 SBV 先做一次静态可达分析：src[p][v] 为可能向 p 发出 BVAL(v) 的进程集合
    (正确进程的输入、拜占庭注入，加上收到 t+1 个来源后会回显的正确进程)，
    由此得到每个进程 bin_values 可能出现的值。BV 与 S-Broadcast 的投递顺序不影响结果。
    """

    def __init__(self, target: str, params: SystemParams, honest: Sequence[int],
                 inputs: Sequence[int], injections: Sequence[Injection]) -> None:
        self.target = target
        self.t = params.t
        self.src: Dict[int, Dict[int, Set[int]]] = {p: {v: set() for v in BINARY_VALUES} for p in honest}
        self.binposs: Dict[int, FrozenSet[int]] = {}
        self.byz_aux: Dict[int, Set[int]] = {p: set() for p in honest}
        if target != TARGET_SBV:
            return
        for q, v in zip(honest, inputs):
            for p in honest:
                self.src[p][v].add(q)
        for p, msg in injections:
            if isinstance(msg, Bval):
                self.src[p][msg.value].add(msg.sender)
            elif isinstance(msg, Aux):
                self.byz_aux[p].add(msg.value)
        changed = True
        while changed:
            changed = False
            for q in honest:
                for v in BINARY_VALUES:
                    if len(self.src[q][v]) < self.t + 1:
                        continue
                    for p in honest:
                        if q not in self.src[p][v]:
                            self.src[p][v].add(q)
                            changed = True
        for p in honest:
            self.binposs[p] = frozenset(v for v in BINARY_VALUES if len(self.src[p][v]) >= 2 * self.t + 1)
        logger.debug(f"bin_values 可能取值: {self.binposs}")

    def order_free(self, pid: int, state) -> bool:
        """发给 pid 的任意两条投递在之后所有状态下都可交换"""
        if self.target != TARGET_SBV:
            return True
        possible = self.binposs[pid]
        if not state.aux_sent and len(possible) > 1:
            return False
        if state.completed:
            return True
        return len(possible | state.justification_extra) <= 1 and len(self.byz_aux[pid]) <= 1

    def inert(self, pid: int, state, msg: ProtocolMessage) -> bool:
        """投递这条消息不会产生任何效果，也不会改变后续投递的效果"""
        if self.target != TARGET_SBV:
            return True
        bv = state.bv
        if isinstance(msg, Bval):
            v = msg.value
            sources = len(self.src[pid][v])
            return (
                msg.sender in bv.senders_of.get(v, ())
                or v in bv.bin_values
                or sources < self.t + 1
                or (v in bv.echoed and sources < 2 * self.t + 1)
            )
        if isinstance(msg, Aux):
            if state.completed or msg.sender in state.aux_received:
                return True
            if msg.value in self.binposs[pid] | state.justification_extra:
                return False
            # 同一发送者之后若还能送来另一个值，先到的那个会占住位置
            return msg.sender != _BYZ or self.byz_aux[pid] <= {msg.value}
        return False

    def candidates(self, states, choices: List[Tuple[int, ProtocolMessage]]) -> List[Tuple[int, ProtocolMessage]]:
        for recipient, msg in choices:
            if self.order_free(recipient, states[recipient]):
                return [(recipient, msg)]
        for recipient, msg in choices:
            if self.inert(recipient, states[recipient], msg):
                return [(recipient, msg)]
        return choices


# ------------------ 终止状态上的性质 ------------------

def _bv_properties(states: Dict[int, BvState], inputs: Sequence[int], t: int) -> Dict[str, bool]:
    bins = {pid: s.bin_set for pid, s in states.items()}
    proposed = set(inputs)
    all_bins = frozenset().union(*bins.values())
    counts = Counter(inputs)
    return {
        "BV-Justification": all_bins <= proposed,
        "BV-Obligation": all(v in b for v, c in counts.items() if c >= t + 1 for b in bins.values()),
        "BV-Uniformity": all(b == all_bins for b in bins.values()),
        "BV-Termination": all(b for b in bins.values()),
        "BV-Single-value": len(proposed) != 1 or all(b == proposed for b in bins.values()),
    }


def _sbv_properties(states: Dict[int, SbvState], inputs: Sequence[int], t: int) -> Dict[str, bool]:
    views = {pid: s.view for pid, s in states.items()}
    proposed = set(inputs)
    done = {pid: v for pid, v in views.items() if v is not None}
    singletons = {next(iter(v)) for v in done.values() if len(v) == 1}
    all_view_values = frozenset().union(*done.values()) if done else frozenset()
    return {
        "SBV-Termination": len(done) == len(states),
        "SBV-Obligation": all(v for v in done.values()),
        "SBV-Justification": all_view_values <= proposed,
        "SBV-Inclusion": all(
            next(iter(vi)) in vj for vi in done.values() if len(vi) == 1 for vj in done.values()
        ),
        "SBV-Uniformity": len(proposed) != 1 or all(v == proposed for v in done.values()),
        "SBV-Singleton": len(singletons) <= 1,
        "SBV-Binvalues": all(all_view_values <= s.bin_values for s in states.values()),
    }


def _sbc_properties(states: Dict[int, SbcPair], calls: Dict[int, Tuple[int, bool]], t: int) -> Dict[str, bool]:
    initiators = Counter(v for v, should in calls.values() if should)
    result = {"S-Justification": True, "S-Obligation": True, "S-Uniformity": True}
    for v in BINARY_VALUES:
        flags = [s.svalue(v) for s in states.values()]
        if initiators[v] == 0 and any(flags):
            result["S-Justification"] = False
        if initiators[v] >= t + 1 and not all(flags):
            result["S-Obligation"] = False
        if any(flags) and not all(flags):
            result["S-Uniformity"] = False
    result["S-Termination"] = all(inst.started for s in states.values() for inst in s.instances.values())
    return result


# ------------------ 探索 ------------------

class _Explorer:
    def __init__(self, honest: Sequence[int], evaluate: Callable, max_states: int,
                 group: List[Dict[int, int]], order: Optional[DeliveryOrder]) -> None:
        self.honest = list(honest)
        self.evaluate = evaluate
        self.max_states = max_states
        self.group = group
        self.order = order
        self.visited: set = set()
        self.terminal = 0
        self.truncated = False
        self.tallies: Dict[str, Dict[str, int]] = {}
        self.failure: Optional[Tuple[str, List[str]]] = None

    def _key(self, states, pending: Pending):
        """所有置换下字典序最小的全局状态键"""
        best = None
        for perm in self.group:
            slots = {perm[q]: states[q].state_key(perm) for q in self.honest}
            msgs = tuple(sorted(
                ((perm[r], m.kind, m.value, perm[m.sender]), c) for (r, m), c in pending.items()
            ))
            key = (tuple(slots[p] for p in self.honest), msgs)
            if best is None or key < best:
                best = key
        return best

    def explore(self, states, pending: Pending, path: List[str]) -> None:
        if self.failure is not None or self.truncated:
            return
        key = self._key(states, pending)
        if key in self.visited:
            return
        if len(self.visited) >= self.max_states:
            self.truncated = True
            return
        self.visited.add(key)
        choices = sorted(pending, key=lambda k: (k[0], repr(k[1])))
        if not choices:
            self.terminal += 1
            for name, ok in self.evaluate(states).items():
                tally = self.tallies.setdefault(name, {"pass": 0, "fail": 0})
                tally["pass" if ok else "fail"] += 1
                if not ok and self.failure is None:
                    self.failure = (name, list(path))
            return
        if self.order is not None:
            choices = self.order.candidates(states, choices)
        for recipient, msg in choices:
            new_state = states[recipient].clone()
            effects = new_state.handle(Deliver(msg))
            path.append(f"deliver {msg.kind}({msg.value}) from p{msg.sender} to p{recipient}")
            self._check_monotone(states[recipient], new_state, path)
            next_states = dict(states)
            next_states[recipient] = new_state
            next_pending = Counter(pending)
            next_pending[(recipient, msg)] -= 1
            if not next_pending[(recipient, msg)]:
                del next_pending[(recipient, msg)]
            for effect in effects:
                if isinstance(effect, Broadcast):
                    for p in self.honest:
                        next_pending[(p, effect.msg)] += 1
            self.explore(next_states, next_pending, path)
            path.pop()

    def _check_monotone(self, old, new, path: List[str]) -> None:
        """标志与 bin_values 只增不减"""
        if self.failure is not None:
            return
        if isinstance(old, SbcPair):
            if any(old.svalue(v) and not new.svalue(v) for v in BINARY_VALUES):
                self.failure = (MONOTONICITY, list(path))
        elif isinstance(old, (BvState, SbvState)):
            old_bv = old if isinstance(old, BvState) else old.bv
            new_bv = new if isinstance(new, BvState) else new.bv
            if not old_bv.bin_set <= new_bv.bin_set:
                self.failure = (MONOTONICITY, list(path))


def run_check(
    target: str,
    inputs: Sequence[int] = (),
    byzantine: str = BYZ_EQUIVOCATE,
    inputs_true: Sequence[int] = (),
    inputs_false: Sequence[int] = (),
    max_states: int = 2_000_000,
    reduction: bool = True,
) -> CheckReport:
    """
    穷举一个抽象实例的全部投递交错

    Args:
        target: bv / sbv / sbc
        inputs: bv/sbv 时三个正确进程的输入
        byzantine: none / equivocate / flood
        inputs_true / inputs_false: sbc 时以 should_broadcast=true/false 调用的值，依次分配给 p0..p2
        max_states: 状态数上限，超过则报告 truncated
        reduction: 是否启用对称与偏序归约；关闭后逐条展开每个交错

    Returns:
        CheckReport: 探索规模、各性质的通过/失败次数与反例路径
    """
    if target not in TARGETS:
        raise ConfigError(f"未知检查目标: {target}")
    if byzantine not in CHECK_BYZANTINE:
        raise ConfigError(f"未知注入方式: {byzantine}")
    params = validate_params(4, 1)
    honest = sorted(params.non_faulty)
    calls: Dict[int, Tuple[int, bool]] = {}
    if target == TARGET_SBC:
        seq = [(v, True) for v in inputs_true] + [(v, False) for v in inputs_false]
        if len(seq) > len(honest) or any(v not in BINARY_VALUES for v, _ in seq):
            raise ConfigError(f"sbc 输入最多 {len(honest)} 个二进制值")
        calls = {pid: call for pid, call in zip(honest, seq)}
        report_inputs = {"true": list(inputs_true), "false": list(inputs_false)}
    else:
        if len(inputs) != len(honest) or any(v not in BINARY_VALUES for v in inputs):
            raise ConfigError(f"{target} 需要 {len(honest)} 个二进制输入: {list(inputs)}")
        report_inputs = {"inputs": list(inputs)}

    states, effects = _init_states(target, params, honest, inputs, calls)
    injections = _byzantine_messages(target, byzantine, honest)
    pending: Pending = Counter()
    for _, effect in effects:
        if isinstance(effect, Broadcast):
            for p in honest:
                pending[(p, effect.msg)] += 1
    for recipient, msg in injections:
        pending[(recipient, msg)] += 1

    if target == TARGET_BV:
        evaluate = lambda s: _bv_properties(s, inputs, params.t)  # noqa: E731
    elif target == TARGET_SBV:
        evaluate = lambda s: _sbv_properties(s, inputs, params.t)  # noqa: E731
    else:
        evaluate = lambda s: _sbc_properties(s, calls, params.t)  # noqa: E731

    identity = {p: p for p in (*honest, _BYZ)}
    if reduction:
        signature = {
            q: (
                calls.get(q) if target == TARGET_SBC else inputs[i],
                tuple(sorted((m.kind, m.value) for r, m in injections if r == q)),
            )
            for i, q in enumerate(honest)
        }
        group = symmetry_group(honest, signature)
        order: Optional[DeliveryOrder] = DeliveryOrder(target, params, honest, inputs, injections)
    else:
        group, order = [identity], None

    explorer = _Explorer(honest, evaluate, max_states, group, order)
    logger.info(f"开始穷举: target={target} byz={byzantine} inputs={report_inputs} "
                f"reduction={reduction} symmetry={len(group)}")
    explorer.explore(states, pending, [])

    report = CheckReport(
        target=target, byzantine=byzantine, inputs=report_inputs,
        explored=len(explorer.visited), terminal=explorer.terminal,
        truncated=explorer.truncated, reduction=reduction, symmetry=len(group),
        properties=explorer.tallies,
    )
    if explorer.failure is not None:
        report.failed, report.counterexample = explorer.failure
    logger.info(f"穷举结束: explored={report.explored} terminal={report.terminal} ok={report.ok}")
    return report


def property_names(target: str) -> Tuple[str, ...]:
    return {TARGET_BV: BV_PROPERTIES, TARGET_SBV: SBV_PROPERTIES, TARGET_SBC: S_PROPERTIES}[target]
