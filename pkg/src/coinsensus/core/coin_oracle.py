"""
公共硬币预言机

按轮次索引的理想化公共硬币：
- weak: 参数 d，至少 1 个正确进程请求后揭示；
  以 1/d 概率全体为 0，1/d 概率全体为 1，其余情况按分裂策略逐进程赋值
- strong: 行为等同 weak(d=2)，但需要 t+1 个正确进程请求后才揭示，所有进程得到同一个比特

揭示前任何人 (包括调度器/攻击者) 都读不到结果，只能经 adversary_peek 这道闸门访问。
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Tuple, Union

from loguru import logger

from coinsensus.core.common_utils import is_binary, negate
from coinsensus.core.protocol_core import ConfigError, SystemParams

COIN_WEAK = "weak"
COIN_STRONG = "strong"
COIN_KINDS = (COIN_WEAK, COIN_STRONG)

# 分裂分支的逐进程赋值策略
SPLIT_ESTIMATE_OPPOSING = "estimate-opposing"  # 与请求方倾向相反，且保证不全体一致
SPLIT_FAIR_BIT = "fair-bit"                    # 独立公平比特，全体一致时重抽
SPLIT_RAW_BIT = "raw-bit"                      # 独立公平比特，可能碰巧一致
SPLIT_HALF_HALF = "half-half"                  # 编号前一半 0、后一半 1
SPLIT_STRATEGIES = (SPLIT_ESTIMATE_OPPOSING, SPLIT_FAIR_BIT, SPLIT_RAW_BIT, SPLIT_HALF_HALF)

OUTCOME_ALL_0 = "all-0"
OUTCOME_ALL_1 = "all-1"
OUTCOME_SPLIT = "split"


class _Marker:
    __slots__ = ("name",)

    def __init__(self, name: str) -> None:
        self.name = name

    def __repr__(self) -> str:
        return self.name


PENDING = _Marker("Pending")
UNREVEALED = _Marker("Unrevealed")


@dataclass(frozen=True)
class CoinConfig:
    kind: str
    params: SystemParams
    seed: int = 0
    d: int = 2
    split_strategy: str = SPLIT_ESTIMATE_OPPOSING

    def __post_init__(self) -> None:
        if self.kind not in COIN_KINDS:
            raise ConfigError(f"未知硬币类型: {self.kind}")
        if self.d < 2:
            raise ConfigError(f"硬币参数 d 必须 >= 2: {self.d}")
        if self.split_strategy not in SPLIT_STRATEGIES:
            raise ConfigError(f"未知分裂策略: {self.split_strategy}")

    @property
    def effective_d(self) -> int:
        return 2 if self.kind == COIN_STRONG else self.d

    @property
    def reveal_threshold(self) -> int:
        """揭示所需的正确请求者数"""
        return self.params.t_plus_1 if self.kind == COIN_STRONG else 1


@dataclass
class CoinRoundState:
    requesters: Dict[int, Optional[int]] = field(default_factory=dict)  # pid -> hint，按请求顺序
    revealed: bool = False
    outcome: Optional[str] = None
    _assignment: Dict[int, int] = field(default_factory=dict)
    illegal_reads: int = 0

    def read_assignment(self) -> Optional[Mapping[int, int]]:
        """揭示前读取视为违规，计数并返回 None"""
        if not self.revealed:
            self.illegal_reads += 1
            return None
        return MappingProxyType(self._assignment)


CoinResponse = Union[int, _Marker]


class CoinOracle:
    """一次运行独享一个预言机，只在单个模拟线程中访问"""

    def __init__(self, config: CoinConfig) -> None:
        self.config = config
        self.params = config.params
        self.rounds: Dict[int, CoinRoundState] = {}
        self.blocked_peeks = 0
        self._reveals: List[Tuple[int, int, int]] = []  # (pid, round, value) 待投递
        # estimate-opposing 无提示进程的交替起点
        self._alternate: Dict[int, int] = {}

    # ------------------ 请求与揭示 ------------------

    def _round(self, r: int) -> CoinRoundState:
        return self.rounds.setdefault(r, CoinRoundState())

    def _rng(self, r: int) -> random.Random:
        return random.Random(f"coin:{self.config.seed}:{r}")

    def request(self, r: int, pid: int, hint: Optional[int] = None) -> CoinResponse:
        """
        进程 pid 请求第 r 轮硬币

        Returns:
            已揭示时返回该进程的比特，否则返回 PENDING (揭示后经 pop_reveals 投递)
        """
        if not self.params.is_valid_pid(pid):
            raise ConfigError(f"非法进程编号: {pid!r}")
        state = self._round(r)
        if pid in state.requesters:
            return self._value_for(r, state, pid) if state.revealed else PENDING
        state.requesters[pid] = hint if is_binary(hint) else None
        if state.revealed:
            return self._value_for(r, state, pid)
        honest = sum(1 for p in state.requesters if p in self.params.non_faulty)
        if honest < self.config.reveal_threshold:
            return PENDING
        self._reveal(r, state)
        own = self._value_for(r, state, pid)
        for other in state.requesters:
            if other != pid:
                self._reveals.append((other, r, self._value_for(r, state, other)))
        return own

    def pop_reveals(self) -> List[Tuple[int, int, int]]:
        """取出因本次揭示而需要补投给先前请求者的 (pid, round, value)"""
        out, self._reveals = self._reveals, []
        return out

    def _reveal(self, r: int, state: CoinRoundState) -> None:
        rng = self._rng(r)
        d = self.config.effective_d
        draw = rng.randrange(d)
        members = range(self.params.n)
        if draw == 0:
            state.outcome = OUTCOME_ALL_0
            state._assignment = {p: 0 for p in members}
        elif draw == 1:
            state.outcome = OUTCOME_ALL_1
            state._assignment = {p: 1 for p in members}
        else:
            state.outcome = OUTCOME_SPLIT
            state._assignment = self._eager_split(rng)
            self._alternate[r] = rng.randrange(2)
        state.revealed = True
        logger.debug(f"硬币第 {r} 轮揭示: {state.outcome}")

    def _eager_split(self, rng: random.Random) -> Dict[int, int]:
        strategy = self.config.split_strategy
        n = self.params.n
        honest = sorted(self.params.non_faulty)
        if strategy == SPLIT_ESTIMATE_OPPOSING:
            return {}  # 请求时逐个绑定
        if strategy == SPLIT_HALF_HALF:
            flip = rng.randrange(2)
            half = len(honest) // 2
            assignment = {p: rng.randrange(2) for p in range(n)}
            for i, p in enumerate(honest):
                assignment[p] = (0 if i < half else 1) ^ flip
            return assignment
        while True:
            assignment = {p: rng.randrange(2) for p in range(n)}
            if strategy == SPLIT_RAW_BIT or len(honest) < 2:
                return assignment
            if len({assignment[p] for p in honest}) > 1:
                return assignment

    def _value_for(self, r: int, state: CoinRoundState, pid: int) -> int:
        if pid in state._assignment:
            return state._assignment[pid]
        # estimate-opposing 分裂：首次交付时绑定，之后不再变化
        hint = state.requesters.get(pid)
        seen_hints = [h for h in state.requesters.values() if h is not None]
        if hint is not None:
            value = negate(hint)
        elif seen_hints:
            value = negate(seen_hints[0])
        else:
            bound = sum(1 for p in state._assignment if p in self.params.non_faulty)
            value = self._alternate.get(r, 0) ^ (bound % 2)
        honest_bound = [state._assignment[p] for p in state._assignment if p in self.params.non_faulty]
        is_last = pid in self.params.non_faulty and len(honest_bound) == len(self.params.non_faulty) - 1
        if is_last and honest_bound and all(v == value for v in honest_bound):
            value = negate(value)
        state._assignment[pid] = value
        return value

    # ------------------ 攻击者闸门 ------------------

    def adversary_peek(self, r: int) -> Union[_Marker, Mapping[int, int]]:
        """
        攻击者/调度器读取硬币的唯一入口，揭示前一律返回 UNREVEALED

        estimate-opposing 分裂轮里，尚未请求的进程的比特要等它请求时才绑定，
        此时返回的映射只含已绑定的进程。
        """
        state = self.rounds.get(r)
        if state is None or not state.revealed:
            self.blocked_peeks += 1
            return UNREVEALED
        return state.read_assignment()

    @property
    def illegal_reads(self) -> int:
        """绕过闸门、在揭示前读取结果的次数，必须为 0"""
        return sum(s.illegal_reads for s in self.rounds.values())

    def trace_payload(self, r: int) -> Dict[str, object]:
        """trace 中 coin 记录的内容：本轮结果类别与已绑定的各进程比特"""
        state = self.rounds[r]
        return {
            "round": r,
            "outcome": state.outcome,
            "assignment": {str(p): v for p, v in sorted(state._assignment.items())},
        }


def classify(assignment: Mapping[int, int], members) -> str:
    values = {assignment[p] for p in members if p in assignment}
    if values == {0}:
        return OUTCOME_ALL_0
    if values == {1}:
        return OUTCOME_ALL_1
    return OUTCOME_SPLIT


def sample_outcomes(config: CoinConfig, rounds: int) -> Counter:
    """
    直接测量硬币输出分布

    每轮让全部正确进程按编号顺序无提示地请求，按正确进程拿到的值归类。

    Returns:
        Counter: all-0 / all-1 / split 三类的计数
    """
    oracle = CoinOracle(config)
    honest = sorted(config.params.non_faulty)
    counts: Counter = Counter({OUTCOME_ALL_0: 0, OUTCOME_ALL_1: 0, OUTCOME_SPLIT: 0})
    for r in range(1, rounds + 1):
        got: Dict[int, int] = {}
        for pid in honest:
            value = oracle.request(r, pid)
            if value is not PENDING:
                got[pid] = value
        for pid, _, value in oracle.pop_reveals():
            got[pid] = value
        counts[classify(got, honest)] += 1
    return counts
