"""
Monte-Carlo 批量运行

按参数网格 × 连续种子展开运行，分发到进程池 (或 joblib)，
在父进程中汇总为每个网格单元的统计量。结果按 (单元, 种子) 重新排序，
输出与完成顺序无关。
"""

from __future__ import annotations

import csv
import io
import itertools
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from rich.console import Console
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    SpinnerColumn,
    TextColumn,
    TimeElapsedColumn,
)

try:
    from joblib import Parallel, delayed
    HAS_JOBLIB = True
except ImportError:
    HAS_JOBLIB = False

from coinsensus.core.common_utils import parse_proposals
from coinsensus.core.protocol_core import ConfigError
from coinsensus.core.simnet import RunConfig, run

console = Console(stderr=True)

CSV_COLUMNS = (
    "cell-id", "runs", "mean_round", "p50", "p95", "max",
    "violations", "timeouts", "bcast_min", "bcast_max",
)

_INT_FIELDS = {f.name for f in fields(RunConfig) if f.type in ("int", int)}


@dataclass
class SweepSpec:
    base: RunConfig
    runs: int = 100
    seed_start: int = 0
    vary: List[Tuple[str, List[Any]]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.runs < 1:
            raise ConfigError(f"runs 必须 >= 1: {self.runs}")
        known = {f.name for f in fields(RunConfig)}
        for name, values in self.vary:
            if name not in known:
                raise ConfigError(f"未知的网格字段: {name}")
            if not values:
                raise ConfigError(f"网格字段 {name} 没有取值")

    @property
    def seeds(self) -> range:
        return range(self.seed_start, self.seed_start + self.runs)

    def cells(self) -> List[Tuple[str, RunConfig]]:
        """展开参数网格，返回 (cell_id, 配置)；n 变化时 t 与提案随之调整"""
        if not self.vary:
            return [("base", self.base)]
        names = [name for name, _ in self.vary]
        out: List[Tuple[str, RunConfig]] = []
        for combo in itertools.product(*(values for _, values in self.vary)):
            changes = dict(zip(names, combo))
            cfg = replace(self.base, **changes)
            if "n" in changes and cfg.n != self.base.n:
                if "t" not in changes:
                    cfg = replace(cfg, t=(cfg.n - 1) // 3)
                if "proposals" not in changes:
                    pattern = self.base.proposals
                    cfg = replace(cfg, proposals=tuple(pattern[i % len(pattern)] for i in range(cfg.n)),
                                  non_faulty=None)
            cell_id = ",".join(f"{k}={v}" for k, v in changes.items())
            out.append((cell_id, cfg))
        return out


def parse_vary(items: Sequence[str]) -> List[Tuple[str, List[Any]]]:
    """解析 "field=v1,v2" 形式的网格参数，整数字段自动转换"""
    result: List[Tuple[str, List[Any]]] = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"网格参数格式应为 field=v1,v2: {item}")
        name, raw = item.split("=", 1)
        name = name.strip().replace("-", "_")
        if name == "proposals":
            # 提案本身含逗号，多组之间用分号分隔
            try:
                result.append((name, [tuple(parse_proposals(p)) for p in raw.split(";") if p.strip()]))
            except ValueError as e:
                raise ConfigError(f"网格提案格式错误: {raw}") from e
            continue
        values: List[Any] = [v.strip() for v in raw.split(",") if v.strip()]
        if name in _INT_FIELDS:
            try:
                values = [int(v) for v in values]
            except ValueError as e:
                raise ConfigError(f"网格字段 {name} 需要整数: {raw}") from e
        result.append((name, values))
    return result


@dataclass
class RunSummary:
    """单次运行的精简结果，跨进程传回父进程"""
    cell: int
    seed: int
    decision_round: Optional[int]
    safety_ok: bool
    violations: List[str]
    timed_out: bool
    total_events: int
    round_counts: Dict[int, Tuple[int, int]]  # 轮次 -> (各正确进程中的最小, 最大) 广播数


def _run_one(cell: int, config: RunConfig) -> RunSummary:
    result = run(config)
    per_round: Dict[int, List[int]] = {}
    for (_, r), count in result.metered_counts().items():
        per_round.setdefault(r, []).append(count)
    return RunSummary(
        cell=cell,
        seed=config.seed,
        decision_round=result.decision_round if not result.timed_out else None,
        safety_ok=result.safety_ok,
        violations=[v.check for v in result.violations],
        timed_out=result.timed_out,
        total_events=result.total_events,
        round_counts={r: (min(c), max(c)) for r, c in per_round.items()},
    )


@dataclass
class CellStats:
    cell_id: str
    runs: int = 0
    decision_rounds: List[int] = field(default_factory=list)
    histogram: Dict[str, int] = field(default_factory=dict)
    round_counts: Dict[int, List[int]] = field(default_factory=dict)  # 轮次 -> [min, max]
    violations: int = 0
    violation_checks: Dict[str, int] = field(default_factory=dict)
    timeouts: int = 0

    def add(self, summary: RunSummary) -> None:
        self.runs += 1
        if summary.decision_round is None:
            self.histogram["timeout"] = self.histogram.get("timeout", 0) + 1
        else:
            self.decision_rounds.append(summary.decision_round)
            key = str(summary.decision_round)
            self.histogram[key] = self.histogram.get(key, 0) + 1
        if not summary.safety_ok:
            self.violations += 1
            for check in summary.violations:
                self.violation_checks[check] = self.violation_checks.get(check, 0) + 1
        if summary.timed_out:
            self.timeouts += 1
        for r, (lo, hi) in summary.round_counts.items():
            span = self.round_counts.setdefault(r, [lo, hi])
            span[0] = min(span[0], lo)
            span[1] = max(span[1], hi)

    def _rounds(self) -> np.ndarray:
        return np.asarray(self.decision_rounds, dtype=float)

    @property
    def mean_round(self) -> Optional[float]:
        return float(self._rounds().mean()) if self.decision_rounds else None

    def percentile(self, q: float) -> Optional[float]:
        return float(np.percentile(self._rounds(), q)) if self.decision_rounds else None

    @property
    def max_round(self) -> Optional[int]:
        return max(self.decision_rounds) if self.decision_rounds else None

    def bcast_range(self, first_round: Optional[bool] = None) -> Tuple[Optional[int], Optional[int]]:
        """广播数范围；first_round=True 只看第 1 轮，False 只看第 2 轮起，None 看全部"""
        spans = [
            span for r, span in self.round_counts.items()
            if first_round is None or (r == 1) == first_round
        ]
        if not spans:
            return None, None
        return min(s[0] for s in spans), max(s[1] for s in spans)

    def to_json(self) -> Dict[str, Any]:
        return {
            "cell_id": self.cell_id,
            "runs": self.runs,
            "mean_round": self.mean_round,
            "p50": self.percentile(50),
            "p95": self.percentile(95),
            "max": self.max_round,
            "histogram": dict(sorted(self.histogram.items(), key=lambda kv: (kv[0] == "timeout", _int_or(kv[0])))),
            "bcast_per_round": {str(r): self.round_counts[r] for r in sorted(self.round_counts)},
            "bcast_round1": list(self.bcast_range(True)),
            "bcast_later": list(self.bcast_range(False)),
            "violations": self.violations,
            "violation_checks": dict(sorted(self.violation_checks.items())),
            "timeouts": self.timeouts,
        }


def _int_or(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        return 0


@dataclass
class SweepStats:
    cells: List[CellStats] = field(default_factory=list)
    summaries: List[RunSummary] = field(default_factory=list)

    @property
    def total_violations(self) -> int:
        return sum(c.violations for c in self.cells)

    @property
    def total_timeouts(self) -> int:
        return sum(c.timeouts for c in self.cells)

    def to_json(self) -> Dict[str, Any]:
        return {
            "cells": [c.to_json() for c in self.cells],
            "violations": self.total_violations,
            "timeouts": self.total_timeouts,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for c in self.cells:
            lo, hi = c.bcast_range()
            writer.writerow([
                c.cell_id, c.runs, _fmt(c.mean_round), _fmt(c.percentile(50)), _fmt(c.percentile(95)),
                _fmt(c.max_round), c.violations, c.timeouts, _fmt(lo), _fmt(hi),
            ])
        return buf.getvalue()


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


_worker_level: Optional[str] = None


def _run_logged(cell: int, config: RunConfig, log_level: str) -> RunSummary:
    """
    工作进程内执行一次运行

    新启动的工作进程里 loguru 还是默认的 DEBUG 输出，首次调用时按主进程的级别重设。
    """
    global _worker_level
    if _worker_level != log_level:
        logger.remove()
        logger.add(sys.stderr, level=log_level)
        _worker_level = log_level
    return _run_one(cell, config)


def _default_workers() -> int:
    return max(1, min(32, os.cpu_count() or 1))


def _execute(jobs: List[Tuple[int, RunConfig]], workers: int, progress: Optional[Progress], task,
             log_level: str = "WARNING") -> List[RunSummary]:
    summaries: List[RunSummary] = []
    if workers <= 1:
        for cell, cfg in jobs:
            summaries.append(_run_one(cell, cfg))
            if progress is not None:
                progress.advance(task)
        return summaries
    if HAS_JOBLIB and len(jobs) > 1000:
        # joblib 不支持细粒度进度，一次性更新
        summaries = Parallel(n_jobs=workers)(delayed(_run_logged)(cell, cfg, log_level) for cell, cfg in jobs)
        if progress is not None:
            progress.update(task, completed=len(jobs))
        return summaries
    with ProcessPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(_run_logged, cell, cfg, log_level) for cell, cfg in jobs]
        for future in as_completed(futures):
            summaries.append(future.result())
            if progress is not None:
                progress.advance(task)
    return summaries


def run_sweep(spec: SweepSpec, workers: Optional[int] = None, show_progress: bool = True,
              log_level: str = "WARNING") -> SweepStats:
    """
    执行批量运行

    Args:
        spec: 网格与种子范围
        workers: 工作进程数，None 为自动，1 为在当前进程内顺序执行
        show_progress: 是否显示 rich 进度条
        log_level: 工作进程的 loguru 级别，与命令行 --verbose 对应

    Returns:
        SweepStats: 每个网格单元的统计

    Raises:
        ConfigError / InvalidParams: 任一单元配置非法 (运行前统一校验)
    """
    cells = spec.cells()
    for _, cfg in cells:
        cfg.validate()
    jobs = [
        (i, replace(cfg, seed=seed, record_trace=False, compute_digest=False))
        for i, (_, cfg) in enumerate(cells)
        for seed in spec.seeds
    ]
    workers = workers or _default_workers()
    logger.info(f"批量运行: {len(cells)} 个单元 × {spec.runs} 次, workers={workers}")

    if show_progress:
        with Progress(
            SpinnerColumn(),
            TextColumn("[bold blue]{task.description}"),
            BarColumn(bar_width=30),
            MofNCompleteColumn(),
            TextColumn("•"),
            TimeElapsedColumn(),
            console=console,
        ) as progress:
            task = progress.add_task(f"运行 {len(jobs)} 次模拟", total=len(jobs))
            summaries = _execute(jobs, workers, progress, task, log_level)
    else:
        summaries = _execute(jobs, workers, None, None, log_level)

    summaries.sort(key=lambda s: (s.cell, s.seed))
    stats = SweepStats(cells=[CellStats(cell_id) for cell_id, _ in cells], summaries=summaries)
    for summary in summaries:
        stats.cells[summary.cell].add(summary)
    logger.info(f"批量运行完成: violations={stats.total_violations} timeouts={stats.total_timeouts}")
    return stats
