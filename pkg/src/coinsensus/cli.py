"""Typer CLI for coinsensus

功能:
1. run: 单次模拟，输出 JSON 结果，可选导出 trace
2. sweep: 参数网格 × 种子的批量运行，输出 JSON/CSV 统计
3. check: n=4,t=1 下对单个抽象实例的穷举检查
4. trace: 单次模拟并导出 JSONL trace，打印摘要表

退出码: 0 成功；1 安全性违规 / 超时 / 检查失败；2 配置错误。
"""
from __future__ import annotations

import json
import sys
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional

import typer
from loguru import logger
from rich.console import Console
from rich.table import Table

from coinsensus.config.config import (
    get_check_limits,
    get_coin_defaults,
    get_run_defaults,
    get_sweep_defaults,
    load_run_file,
)
from coinsensus.core.checker import property_names, run_check
from coinsensus.core.common_utils import ALGO_WEAK, canonical_json, parse_proposals
from coinsensus.core.protocol_core import ConfigError, InvalidParams
from coinsensus.core.simnet import RunConfig, RunResult, run as run_simulation, write_trace
from coinsensus.core.sweep import SweepSpec, parse_vary, run_sweep

app = typer.Typer(add_completion=False, help="coinsensus 异步拜占庭二进制共识模拟器")
console = Console(stderr=True)

_RUN_DEFAULTS = get_run_defaults()
_COIN_DEFAULTS = get_coin_defaults()


# ------------------ 辅助函数 ------------------

_log_level = "WARNING"


def _setup_logging(verbose: bool) -> None:
    global _log_level
    _log_level = "DEBUG" if verbose else "WARNING"
    logger.remove()
    logger.add(sys.stderr, level=_log_level)


def _fail_config(e: Exception) -> None:
    console.print(f"[red]配置错误:[/red] {e}")
    raise typer.Exit(2)


def _build_config(
    algo: str, n: int, t: int, proposals: Optional[str], byz: str, sched: str,
    coin_d: int, split: str, seed: int, max_rounds: int, view_selection: str,
    cap: int, config_file: Optional[str],
) -> RunConfig:
    """命令行参数先组成配置，--config 文件中的键再覆盖它们"""
    try:
        values = parse_proposals(proposals, n) if proposals else [1] * n
    except ValueError as e:
        raise ConfigError(str(e)) from e
    base = RunConfig(
        n=n, t=t, algorithm=algo, proposals=tuple(values), scheduler=sched,
        byzantine=byz, coin_d=coin_d, split_strategy=split, seed=seed,
        max_rounds=max_rounds, view_selection=view_selection, delay_cap=cap,
        max_events=_RUN_DEFAULTS["max_events"],
    )
    if config_file:
        base = RunConfig.from_dict(load_run_file(config_file), base=base)
    base.validate()
    return base


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        console.print(f"[green]✓[/green] 已写入 {path}")
    else:
        typer.echo(text, nl=not text.endswith("\n"))


def _result_exit(result: RunResult) -> None:
    if not result.safety_ok:
        for v in result.violations:
            console.print(f"[red]违规[/red] {v.check}: {v.detail}")
        raise typer.Exit(1)
    if result.timed_out:
        console.print("[yellow]运行超时，未全部决定[/yellow]")
        raise typer.Exit(1)


# 单次运行与 trace 共用的选项
_ALGO = typer.Option(ALGO_WEAK, "--algo", help="weak | weak-opt | strong")
_N = typer.Option(4, "--n", help="进程数")
_T = typer.Option(1, "--t", help="最多拜占庭进程数")
_PROPOSALS = typer.Option(None, "--proposals", help="提案，如 1,1,0,1 或 1x7，默认全 1")
_BYZ = typer.Option(_RUN_DEFAULTS["byzantine"], "--byz", help="crash | mute | equivocate | mirror | scripted")
_SCHED = typer.Option(_RUN_DEFAULTS["scheduler"], "--sched", help="fifo | random | lifo | delay-target")
_COIN_D = typer.Option(_COIN_DEFAULTS["d"], "--coin-d", help="weak 硬币参数 d (>=2)")
_SPLIT = typer.Option(_COIN_DEFAULTS["split_strategy"], "--split", help="weak 硬币分裂策略")
_SEED = typer.Option(0, "--seed", envvar="COINSENSUS_SEED", help="随机种子 (可用环境变量 COINSENSUS_SEED)")
_MAX_ROUNDS = typer.Option(_RUN_DEFAULTS["max_rounds"], "--max-rounds", help="超过该轮次视为超时")
_VIEW = typer.Option(_RUN_DEFAULTS["view_selection"], "--view-selection", help="union | first-quorum")
_CAP = typer.Option(_RUN_DEFAULTS["delay_cap"], "--cap", help="公平性上限：消息最多被推迟的投递次数")
_CONFIG = typer.Option(None, "--config", help="运行配置 JSON，键覆盖命令行参数")
_OUT = typer.Option(None, "--out", "-o", help="结果输出文件，默认 stdout")


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="输出 DEBUG 日志")):
    _setup_logging(verbose)


@app.command("run", help="单次模拟运行，输出 JSON 结果")
def run_cmd(
    algo: str = _ALGO, n: int = _N, t: int = _T, proposals: Optional[str] = _PROPOSALS,
    byz: str = _BYZ, sched: str = _SCHED, coin_d: int = _COIN_D, split: str = _SPLIT,
    seed: int = _SEED, max_rounds: int = _MAX_ROUNDS, view_selection: str = _VIEW,
    cap: int = _CAP, config: Optional[str] = _CONFIG, out: Optional[str] = _OUT,
    trace_out: Optional[str] = typer.Option(None, "--trace-out", help="导出 JSONL trace"),
):
    try:
        cfg = _build_config(algo, n, t, proposals, byz, sched, coin_d, split, seed,
                            max_rounds, view_selection, cap, config)
        if trace_out:
            cfg.record_trace = True
        result = run_simulation(cfg)
    except (ConfigError, InvalidParams) as e:
        _fail_config(e)
    _emit(canonical_json(result.to_json()) + "\n", out)
    if trace_out:
        write_trace(result, trace_out)
    _result_exit(result)


@app.command(help="批量运行并统计决定轮次与广播次数")
def sweep(
    algo: str = _ALGO, n: int = _N, t: int = _T, proposals: Optional[str] = _PROPOSALS,
    byz: str = _BYZ, sched: str = _SCHED, coin_d: int = _COIN_D, split: str = _SPLIT,
    seed: int = typer.Option(get_sweep_defaults()["seed_start"], "--seed", envvar="COINSENSUS_SEED",
                             help="起始种子，种子依次为 seed..seed+runs-1"),
    max_rounds: int = _MAX_ROUNDS, view_selection: str = _VIEW, cap: int = _CAP,
    config: Optional[str] = _CONFIG, out: Optional[str] = _OUT,
    runs: int = typer.Option(get_sweep_defaults()["runs"], "--runs", "-r", help="每个网格单元的运行次数"),
    vary: Optional[List[str]] = typer.Option(None, "--vary", help="网格，如 algo=weak,strong；可重复"),
    workers: Optional[int] = typer.Option(get_sweep_defaults()["workers"], "--workers", "-w",
                                          help="工作进程数，1 为顺序执行"),
    fmt: str = typer.Option("json", "--format", "-f", help="json | csv"),
    no_progress: bool = typer.Option(False, "--no-progress", help="不显示进度条"),
):
    if fmt not in ("json", "csv"):
        _fail_config(ConfigError(f"未知输出格式: {fmt}"))
    try:
        base = _build_config(algo, n, t, proposals, byz, sched, coin_d, split, seed,
                             max_rounds, view_selection, cap, config)
        grid = parse_vary([_alias(v) for v in (vary or [])])
        spec = SweepSpec(base=base, runs=runs, seed_start=base.seed, vary=grid)
        stats = run_sweep(spec, workers=workers, show_progress=not no_progress, log_level=_log_level)
    except (ConfigError, InvalidParams) as e:
        _fail_config(e)

    table = Table(title="批量运行统计")
    for col in ("单元", "次数", "平均轮次", "p95", "最大", "违规", "超时", "第1轮广播", "后续广播"):
        table.add_column(col)
    for c in stats.cells:
        r1, rl = c.bcast_range(True), c.bcast_range(False)
        table.add_row(
            c.cell_id, str(c.runs), f"{c.mean_round:.3f}" if c.mean_round is not None else "-",
            f"{c.percentile(95):.1f}" if c.decision_rounds else "-", str(c.max_round or "-"),
            str(c.violations), str(c.timeouts), f"{r1[0]}-{r1[1]}", f"{rl[0]}-{rl[1]}",
        )
    console.print(table)

    text = stats.to_csv() if fmt == "csv" else json.dumps(stats.to_json(), ensure_ascii=False, indent=2) + "\n"
    _emit(text, out)
    if stats.total_violations or stats.total_timeouts:
        raise typer.Exit(1)


def _alias(item: str) -> str:
    """网格参数允许使用命令行的短名"""
    aliases = {"algo": "algorithm", "sched": "scheduler", "byz": "byzantine", "coin-d": "coin_d",
               "split": "split_strategy", "cap": "delay_cap", "view-selection": "view_selection"}
    name, sep, rest = item.partition("=")
    return f"{aliases.get(name.strip(), name.strip())}{sep}{rest}"


@app.command(help="n=4,t=1 下穷举单个抽象实例的全部投递交错")
def check(
    target: str = typer.Option(..., "--target", help="bv | sbv | sbc"),
    inputs: Optional[str] = typer.Option(None, "--inputs", help="bv/sbv：三个正确进程的输入，如 1,1,0"),
    inputs_true: Optional[str] = typer.Option(None, "--inputs-true", help="sbc：以 should_broadcast=true 调用的值"),
    inputs_false: Optional[str] = typer.Option(None, "--inputs-false", help="sbc：以 should_broadcast=false 调用的值"),
    byz: str = typer.Option("equivocate", "--byz", help="none | equivocate | flood"),
    max_states: int = typer.Option(get_check_limits()["max_states"], "--max-states", help="状态数上限"),
    reduction: bool = typer.Option(True, "--reduction/--no-reduction", help="对称与偏序归约"),
    out: Optional[str] = _OUT,
):
    try:
        report = run_check(
            target,
            inputs=parse_proposals(inputs) if inputs else (),
            byzantine=byz,
            inputs_true=parse_proposals(inputs_true) if inputs_true else (),
            inputs_false=parse_proposals(inputs_false) if inputs_false else (),
            max_states=max_states,
            reduction=reduction,
        )
    except (ConfigError, InvalidParams, ValueError) as e:
        _fail_config(e)

    table = Table(title=f"穷举检查 {target} (explored={report.explored}, terminal={report.terminal})")
    table.add_column("性质")
    table.add_column("通过", justify="right")
    table.add_column("失败", justify="right")
    for name in property_names(target):
        tally = report.properties.get(name, {"pass": 0, "fail": 0})
        style = "red" if tally["fail"] else "green"
        table.add_row(f"[{style}]{name}[/{style}]", str(tally["pass"]), str(tally["fail"]))
    console.print(table)

    _emit(json.dumps(report.to_json(), ensure_ascii=False, indent=2) + "\n", out)
    if report.truncated:
        console.print("[yellow]状态数达到上限，探索不完整[/yellow]")
        raise typer.Exit(1)
    if report.failed:
        console.print(f"[red]性质 {report.failed} 失败，反例路径:[/red]")
        for line in report.counterexample or []:
            console.print(f"  {line}")
        raise typer.Exit(1)


@app.command(help="单次运行并导出 JSONL trace，打印摘要")
def trace(
    algo: str = _ALGO, n: int = _N, t: int = _T, proposals: Optional[str] = _PROPOSALS,
    byz: str = _BYZ, sched: str = _SCHED, coin_d: int = _COIN_D, split: str = _SPLIT,
    seed: int = _SEED, max_rounds: int = _MAX_ROUNDS, view_selection: str = _VIEW,
    cap: int = _CAP, config: Optional[str] = _CONFIG,
    trace_out: str = typer.Option("trace.jsonl", "--trace-out", help="trace 输出文件"),
):
    try:
        cfg = _build_config(algo, n, t, proposals, byz, sched, coin_d, split, seed,
                            max_rounds, view_selection, cap, config)
        cfg.record_trace = True
        result = run_simulation(cfg)
    except (ConfigError, InvalidParams) as e:
        _fail_config(e)
    path = write_trace(result, trace_out)

    kinds: Dict[str, int] = Counter(rec.kind for rec in result.trace)
    table = Table(title=f"trace 摘要 ({path}, digest={result.trace_digest})")
    table.add_column("记录类型")
    table.add_column("条数", justify="right")
    for kind, count in sorted(kinds.items()):
        table.add_row(kind, str(count))
    console.print(table)
    for pid, (value, r) in sorted(result.decisions.items()):
        console.print(f"p{pid} 在第 {r} 轮决定 {value}")
    _result_exit(result)


# 外部调用入口

def run():  # pragma: no cover
    app()


if __name__ == "__main__":  # pragma: no cover
    run()
