"""
离散事件模拟器

一次运行 = 一个线程：在途消息池 + 调度器 + 拜占庭注入 + 硬币预言机 + 全局观察者。
相同 RunConfig (含种子) 必然得到相同的 trace 与摘要。
"""

from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Tuple, Union

from loguru import logger

from coinsensus.core.adversary import (
    ByzantineStrategy,
    PendingMessage,
    Scheduler,
    byzantine_emit,
    byzantine_start,
    make_scheduler,
    make_strategy,
)
from coinsensus.core.coin_oracle import (
    COIN_STRONG,
    COIN_WEAK,
    PENDING,
    SPLIT_ESTIMATE_OPPOSING,
    SPLIT_STRATEGIES,
    CoinConfig,
    CoinOracle,
)
from coinsensus.core.common_utils import (
    ALGO_STRONG,
    ALGO_WEAK,
    ALGO_WEAK_OPT,
    ALGORITHMS,
    BOT,
    BYZ_CRASH,
    BYZANTINE_STRATEGIES,
    FNV_OFFSET_64,
    SCHED_RANDOM,
    SCHEDULERS,
    VIEW_SELECTIONS,
    VIEW_UNION,
    canonical_json,
    fnv1a_64,
    format_digest,
    parse_proposals,
)
from coinsensus.core.consensus_strong import StrongConsensus
from coinsensus.core.consensus_weak import WeakConsensus
from coinsensus.core.protocol_core import (
    Broadcast,
    CoinValue,
    ConfigError,
    Decide,
    Deliver,
    Effect,
    ProtocolViolation,
    RequestCoin,
    Start,
    SystemParams,
    validate_params,
)

StateMachine = Union[WeakConsensus, StrongConsensus]


# ------------------ 配置与结果 ------------------

@dataclass
class RunConfig:
    """一次模拟运行的全部输入；相同配置 (含种子) 得到相同结果"""
    n: int = 4
    t: int = 1
    algorithm: str = ALGO_WEAK
    proposals: Tuple[int, ...] = (1, 1, 1, 1)
    non_faulty: Optional[Tuple[int, ...]] = None
    scheduler: str = SCHED_RANDOM
    delay_targets: Tuple[int, ...] = (0,)
    delay_cap: int = 64
    byzantine: str = BYZ_CRASH
    byzantine_by_pid: Dict[int, str] = field(default_factory=dict)
    script: List[Dict[str, Any]] = field(default_factory=list)
    coin_kind: Optional[str] = None
    coin_d: int = 2
    split_strategy: str = SPLIT_ESTIMATE_OPPOSING
    seed: int = 0
    max_rounds: int = 200
    max_events: int = 3_000_000
    view_selection: str = VIEW_UNION
    record_trace: bool = False
    compute_digest: bool = True

    @property
    def params(self) -> SystemParams:
        return validate_params(self.n, self.t, self.non_faulty)

    @property
    def resolved_coin_kind(self) -> str:
        if self.coin_kind is not None:
            return self.coin_kind
        return COIN_STRONG if self.algorithm == ALGO_STRONG else COIN_WEAK

    def coin_config(self) -> CoinConfig:
        return CoinConfig(
            kind=self.resolved_coin_kind, params=self.params, seed=self.seed,
            d=self.coin_d, split_strategy=self.split_strategy,
        )

    def proposal_of(self, pid: int) -> int:
        return self.proposals[pid]

    def validate(self) -> SystemParams:
        """
        交叉校验配置

        Raises:
            InvalidParams: t >= n/3
            ConfigError: 其余配置错误
        """
        params = self.params
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"未知算法: {self.algorithm}")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"未知调度器: {self.scheduler}")
        if self.view_selection not in VIEW_SELECTIONS:
            raise ConfigError(f"未知 view 选择方式: {self.view_selection}")
        if self.split_strategy not in SPLIT_STRATEGIES:
            raise ConfigError(f"未知分裂策略: {self.split_strategy}")
        for name in [self.byzantine, *self.byzantine_by_pid.values()]:
            if name not in BYZANTINE_STRATEGIES:
                raise ConfigError(f"未知拜占庭策略: {name}")
        for pid in self.byzantine_by_pid:
            if pid in params.non_faulty:
                raise ConfigError(f"拜占庭策略只能分配给 faulty 进程: p{pid}")
        if len(self.proposals) != self.n:
            raise ConfigError(f"提案个数 {len(self.proposals)} 与 n={self.n} 不一致")
        if any(v not in (0, 1) for v in self.proposals):
            raise ConfigError(f"提案只能是 0/1: {list(self.proposals)}")
        if self.algorithm == ALGO_STRONG and self.resolved_coin_kind != COIN_STRONG:
            raise ConfigError("strong 算法需要 t+1 强公共硬币")
        if self.delay_cap < 0:
            raise ConfigError(f"delay_cap 必须为有限非负整数: {self.delay_cap}")
        if self.max_rounds < 1:
            raise ConfigError(f"max_rounds 必须 >= 1: {self.max_rounds}")
        self.coin_config()
        return params

    def to_json(self) -> Dict[str, Any]:
        data = asdict(self)
        data["proposals"] = list(self.proposals)
        data["non_faulty"] = list(self.non_faulty) if self.non_faulty is not None else None
        data["delay_targets"] = list(self.delay_targets)
        data["byzantine_by_pid"] = {str(k): v for k, v in sorted(self.byzantine_by_pid.items())}
        data.pop("record_trace")
        data.pop("compute_digest")
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base: Optional["RunConfig"] = None) -> "RunConfig":
        """
        用字典 (来自 --config JSON) 覆盖 base 的字段

        proposals 可以是列表，也可以是 "1x7" 这样的简写字符串。
        """
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"配置包含未知字段: {sorted(unknown)}")
        merged = asdict(base) if base is not None else {}
        merged.update(data)
        try:
            if isinstance(merged.get("proposals"), str):
                merged["proposals"] = parse_proposals(merged["proposals"])
            for key in ("proposals", "non_faulty", "delay_targets"):
                if merged.get(key) is not None:
                    merged[key] = tuple(int(v) for v in merged[key])
            if "byzantine_by_pid" in merged:
                merged["byzantine_by_pid"] = {int(k): v for k, v in merged["byzantine_by_pid"].items()}
        except (TypeError, ValueError) as e:
            raise ConfigError(f"配置字段格式错误: {e}") from e
        return cls(**merged)


@dataclass(frozen=True)
class Violation:
    check: str
    detail: str = ""


@dataclass(frozen=True)
class TraceRecord:
    seq: int
    kind: str  # header | deliver | broadcast | coin-request | coin-reveal | decide | drop | coin
    payload: Dict[str, Any]

    def to_json(self) -> Dict[str, Any]:
        return {"seq": self.seq, "kind": self.kind, "payload": self.payload}


@dataclass
class RunResult:
    """单次运行的结果对象"""
    decisions: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    safety_ok: bool = True
    violations: List[Violation] = field(default_factory=list)
    broadcasts_per_round: Dict[Tuple[int, int], int] = field(default_factory=dict)
    completed_rounds: Dict[int, int] = field(default_factory=dict)
    total_events: int = 0
    trace_digest: str = ""
    timed_out: bool = False
    stalled: bool = False
    max_lag: int = 0
    max_round_reached: int = 0
    dropped: int = 0
    coin_blocked_peeks: int = 0
    trace: List[TraceRecord] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.safety_ok and not self.timed_out

    @property
    def decision_round(self) -> Optional[int]:
        """所有正确进程都决定时的最大决定轮次"""
        if not self.decisions:
            return None
        return max(r for _, r in self.decisions.values())

    def metered_counts(self) -> Dict[Tuple[int, int], int]:
        """只保留进程已完整走完的轮次的广播计数"""
        return {
            (pid, r): c for (pid, r), c in self.broadcasts_per_round.items()
            if r <= self.completed_rounds.get(pid, 0)
        }

    def to_json(self) -> Dict[str, Any]:
        return {
            "decisions": {str(p): {"value": v, "round": r} for p, (v, r) in sorted(self.decisions.items())},
            "decision_round": self.decision_round,
            "safety_ok": self.safety_ok,
            "violations": [asdict(v) for v in self.violations],
            "timed_out": self.timed_out,
            "stalled": self.stalled,
            "total_events": self.total_events,
            "trace_digest": self.trace_digest,
            "max_lag": self.max_lag,
            "max_round_reached": self.max_round_reached,
            "dropped": self.dropped,
            "broadcasts_per_round": {
                f"{p}:{r}": c for (p, r), c in sorted(self.broadcasts_per_round.items())
            },
        }


# ------------------ 模拟器 ------------------

class Simulation:
    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.params = config.validate()
        self.oracle = CoinOracle(config.coin_config())
        self.scheduler: Scheduler = make_scheduler(config.scheduler, config.seed, config.delay_targets)
        self.processes: Dict[int, StateMachine] = {
            pid: self._make_process(pid) for pid in sorted(self.params.non_faulty)
        }
        self.byzantine: Dict[int, ByzantineStrategy] = {
            pid: make_strategy(config.byzantine_by_pid.get(pid, config.byzantine), pid, self.params, config.script)
            for pid in sorted(self.params.faulty)
        }
        self.pending: Dict[int, PendingMessage] = {}
        self.pending_by_round: Counter = Counter()
        self.result = RunResult()
        self._next_msg = 0
        self._deliveries = 0
        self._seq = 0
        self._digest = FNV_OFFSET_64
        self._revealed: set = set()

    def _make_process(self, pid: int) -> StateMachine:
        cfg = self.config
        if cfg.algorithm == ALGO_STRONG:
            return StrongConsensus(params=self.params, pid=pid, view_selection=cfg.view_selection)
        return WeakConsensus(params=self.params, pid=pid, mode=cfg.algorithm, view_selection=cfg.view_selection)

    # ------------------ trace ------------------

    def _record(self, kind: str, payload: Dict[str, Any]) -> None:
        record = TraceRecord(self._seq, kind, payload)
        self._seq += 1
        if self.config.compute_digest:
            line = canonical_json(record.to_json()) + "\n"
            self._digest = fnv1a_64(line.encode("utf-8"), self._digest)
        if self.config.record_trace:
            self.result.trace.append(record)

    # ------------------ 消息池 ------------------

    def _enqueue(self, sender: int, recipient: int, msg) -> None:
        seq = self._next_msg
        self._next_msg += 1
        self.pending[seq] = PendingMessage(seq, sender, recipient, msg, self._deliveries, len(self.pending))
        self.pending_by_round[msg.round] += 1

    def _pick(self) -> PendingMessage:
        # 最老的在途消息被抢先的次数最多，只需看它
        oldest = next(iter(self.pending.values()))
        lag = oldest.overtaken(self._deliveries)
        if lag > self.result.max_lag:
            self.result.max_lag = lag
        if lag >= self.config.delay_cap:
            seq = oldest.seq
        else:
            seq = self.scheduler.choose(self.pending, self.oracle.adversary_peek)
        item = self.pending.pop(seq)
        self.pending_by_round[item.msg.round] -= 1
        self._deliveries += 1
        return item

    # ------------------ 效果处理 ------------------

    def _apply(self, pid: int, effects: List[Effect]) -> None:
        work: Deque[Tuple[int, Effect]] = deque((pid, e) for e in effects)
        while work:
            owner, effect = work.popleft()
            if isinstance(effect, Broadcast):
                self._on_broadcast(owner, effect.msg)
            elif isinstance(effect, RequestCoin):
                self._record("coin-request", {"pid": owner, "round": effect.round})
                value = self.oracle.request(effect.round, owner, effect.hint)
                served = [] if value is PENDING else [(owner, effect.round, value)]
                served.extend(self.oracle.pop_reveals())
                for target, r, v in served:
                    self._record("coin-reveal", {"pid": target, "round": r, "value": v})
                    if r not in self._revealed:
                        self._revealed.add(r)
                        logger.debug(f"第 {r} 轮硬币揭示: {self.oracle.rounds[r].outcome}")
                    out = self.processes[target].handle(CoinValue(r, v))
                    work.extend((target, e) for e in out)
            elif isinstance(effect, Decide):
                self._on_decide(owner, effect.value, effect.round)

    def _on_broadcast(self, pid: int, msg) -> None:
        key = (pid, msg.round)
        self.result.broadcasts_per_round[key] = self.result.broadcasts_per_round.get(key, 0) + 1
        self._record("broadcast", {"from": pid, "msg": msg.to_json()})
        for recipient in self.processes:
            self._enqueue(pid, recipient, msg)
        for faulty, strategy in self.byzantine.items():
            for recipient, injected in byzantine_emit(strategy, pid, msg):
                self._enqueue(faulty, recipient, injected)

    def _on_decide(self, pid: int, value: int, r: int) -> None:
        self.result.decisions[pid] = (value, r)
        self._record("decide", {"pid": pid, "value": value, "round": r})
        proposed = {self.config.proposal_of(p) for p in self.processes}
        if value not in proposed:
            self._violate("validity", f"p{pid} 决定了无正确进程提议的值 {value}")
        decided_values = {v for v, _ in self.result.decisions.values()}
        if len(decided_values) > 1:
            self._violate("agreement", f"正确进程的决定不一致: {sorted(self.result.decisions.items())}")

    def _violate(self, check: str, detail: str) -> None:
        self.result.violations.append(Violation(check, detail))
        self.result.safety_ok = False
        logger.debug(f"违规 [{check}] {detail}")

    # ------------------ 主循环 ------------------

    def run(self) -> RunResult:
        cfg = self.config
        res = self.result
        self._record("header", {"config": cfg.to_json(), "seed": cfg.seed})
        logger.debug(f"开始运行: algo={cfg.algorithm} n={cfg.n} t={cfg.t} seed={cfg.seed}")
        try:
            for faulty, strategy in self.byzantine.items():
                for recipient, msg in byzantine_start(strategy):
                    self._enqueue(faulty, recipient, msg)
            for pid, proc in self.processes.items():
                self._apply(pid, proc.handle(Start(cfg.proposal_of(pid))))
            self._loop()
        except ProtocolViolation as e:
            self._violate(e.check, e.detail)
        self._finish()
        return res

    def _all_decided(self) -> bool:
        return len(self.result.decisions) == len(self.processes)

    def _loop(self) -> None:
        cfg = self.config
        res = self.result
        stop_round: Optional[int] = None
        while not res.violations:
            if stop_round is None and self._all_decided():
                stop_round = res.decision_round
            if stop_round is not None and not any(
                c for r, c in self.pending_by_round.items() if r <= stop_round
            ):
                return
            if not self.pending:
                res.stalled = True
                res.timed_out = True
                logger.debug("在途消息耗尽但仍有进程未决定")
                return
            if res.total_events >= cfg.max_events:
                res.timed_out = True
                return
            item = self._pick()
            res.total_events += 1
            proc = self.processes[item.recipient]
            before = proc.dropped
            self._record("deliver", {"from": item.sender, "to": item.recipient, "msg": item.msg.to_json()})
            effects = proc.handle(Deliver(item.msg))
            if proc.dropped > before:
                self._record("drop", {"to": item.recipient, "count": proc.dropped - before})
            self._apply(item.recipient, effects)
            if proc.r > cfg.max_rounds:
                res.timed_out = True
                logger.debug(f"p{item.recipient} 超过 max_rounds={cfg.max_rounds}")
                return

    def _finish(self) -> None:
        res = self.result
        res.completed_rounds = {pid: p.completed_rounds for pid, p in self.processes.items()}
        res.max_round_reached = max((p.r for p in self.processes.values()), default=0)
        res.dropped = sum(p.dropped for p in self.processes.values())
        res.coin_blocked_peeks = self.oracle.blocked_peeks
        # 每个揭示过的轮次一条硬币记录，内容为运行结束时已绑定的比特
        for r in sorted(r for r, s in self.oracle.rounds.items() if s.revealed):
            self._record("coin", self.oracle.trace_payload(r))
        res.trace_digest = format_digest(self._digest) if self.config.compute_digest else ""
        seen = {v.check for v in res.violations}
        for violation in observe(self):
            if violation.check not in seen:
                seen.add(violation.check)
                res.violations.append(violation)
        res.safety_ok = not res.violations
        logger.debug(
            f"运行结束: decided={len(res.decisions)}/{len(self.processes)} "
            f"events={res.total_events} timed_out={res.timed_out} safety_ok={res.safety_ok}"
        )


# ------------------ 观察者 ------------------

def observe(sim: Simulation) -> List[Violation]:
    """运行结束时的全局检查"""
    res = sim.result
    cfg = sim.config
    found: List[Violation] = []
    values = {v for v, _ in res.decisions.values()}
    if len(values) > 1:
        found.append(Violation("agreement", f"决定值不一致: {sorted(values)}"))
    proposed = {cfg.proposal_of(p) for p in sim.processes}
    if not values <= proposed:
        found.append(Violation("validity", f"决定值 {sorted(values)} 不在提案 {sorted(proposed)} 中"))
    if not res.timed_out and not sim._all_decided() and not res.violations:
        found.append(Violation("termination", "运行结束但仍有正确进程未决定"))
    if res.max_lag > cfg.delay_cap:
        found.append(Violation("fairness", f"max_lag={res.max_lag} > cap={cfg.delay_cap}"))
    if sim.oracle.illegal_reads:
        found.append(Violation("coin-gate", f"揭示前读取硬币 {sim.oracle.illegal_reads} 次"))

    procs = list(sim.processes.values())
    if cfg.algorithm in (ALGO_WEAK, ALGO_WEAK_OPT):
        rounds = {r for p in procs for r in p.phase1_inputs}
        for r in sorted(rounds):
            inputs = {p.phase1_inputs[r] for p in procs if r in p.phase1_inputs} - {BOT}
            if len(inputs) > 1:
                found.append(Violation("one-sided-phase1", f"第 {r} 轮 stage[r,1] 输入 {sorted(inputs)}"))
        for p in procs:
            bad = [r for r, est in p.round_start_est.items() if est not in (0, 1)]
            if bad:
                found.append(Violation("binary-estimate", f"p{p.pid} 轮次 {bad}"))
    else:
        if res.decisions:
            first_round = min(r for _, r in res.decisions.values())
            v = next(iter(values)) if len(values) == 1 else None
            for p in procs:
                for r, view in p.views.items():
                    if v is not None and r > first_round and view != {v}:
                        found.append(Violation("post-decision-lockstep", f"p{p.pid} 第 {r} 轮 view={sorted(view)}"))
        rounds = {r for p in procs for r in p.sbroadcast_values if r >= 2}
        for r in sorted(rounds):
            chosen = {p.sbroadcast_values[r][0] for p in procs if r in p.sbroadcast_values}
            if len(chosen) > 1:
                found.append(Violation("uniform-sbroadcast", f"第 {r} 轮 S-Broadcast 值 {sorted(chosen)}"))
    return found


def run(config: RunConfig) -> RunResult:
    """
    执行一次模拟运行

    Raises:
        ConfigError / InvalidParams: 配置非法
    """
    return Simulation(config).run()


def write_trace(result: RunResult, path: Union[str, Path]) -> Path:
    """把 trace 写成 JSONL，每行一条记录，字段顺序固定"""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for record in result.trace:
            f.write(canonical_json(record.to_json()) + "\n")
    return out


def read_trace(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
