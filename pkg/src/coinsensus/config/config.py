"""
配置相关工具函数：统一从 simulation_config.json 读取默认值
"""
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict

from coinsensus.core.protocol_core import ConfigError

_CONFIG_PATH = Path(__file__).parent / "simulation_config.json"


@lru_cache(maxsize=None)
def get_config() -> Dict[str, Any]:
    with open(_CONFIG_PATH, "r", encoding="utf-8") as f:
        return json.load(f)


def get_run_defaults() -> Dict[str, Any]:
    cfg = get_config().get("run", {})
    return {
        "max_rounds": cfg.get("max_rounds", 200),
        "max_events": cfg.get("max_events", 3_000_000),
        "delay_cap": cfg.get("delay_cap", 64),
        "scheduler": cfg.get("scheduler", "random"),
        "view_selection": cfg.get("view_selection", "union"),
        "byzantine": cfg.get("byzantine", "crash"),
    }


def get_coin_defaults() -> Dict[str, Any]:
    cfg = get_config().get("coin", {})
    return {"d": cfg.get("d", 2), "split_strategy": cfg.get("split_strategy", "estimate-opposing")}


def get_sweep_defaults() -> Dict[str, Any]:
    cfg = get_config().get("sweep", {})
    return {
        "workers": cfg.get("workers"),
        "runs": cfg.get("runs", 100),
        "seed_start": cfg.get("seed_start", 0),
    }


def get_check_limits() -> Dict[str, Any]:
    return {"max_states": get_config().get("check", {}).get("max_states", 2_000_000)}


def load_run_file(path: str) -> Dict[str, Any]:
    """读取 --config 指定的运行配置 JSON，键为 RunConfig 字段名"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"无法读取配置文件 {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件不是合法 JSON {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件顶层必须是对象: {path}")
    return data
