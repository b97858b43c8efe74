"""
统计辅助函数

把批量运行得到的决定轮次分布与理论分布对照：
几何分布卡方拟合、生存比例的逐轮衰减率拟合、百分位摘要。
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class GeometricFit:
    p: float
    chi2: float
    p_value: float
    dof: int
    mean: float

    @property
    def consistent(self) -> bool:
        return self.p_value > 0.01


def geometric_fit(rounds: Sequence[int], p: float = 0.5, min_expected: float = 5.0) -> GeometricFit:
    """
    决定轮次与 geometric(p) 的卡方拟合优度检验

    尾部期望频数不足 min_expected 的格子合并成一个尾格。

    Args:
        rounds: 每次运行的决定轮次 (从 1 开始)
        p: 每轮成功概率

    Returns:
        GeometricFit: 卡方统计量与 p 值
    """
    data = np.asarray(rounds, dtype=int)
    if data.size == 0:
        raise ValueError("没有可用的决定轮次")
    total = data.size
    observed, expected = [], []
    k = 1
    while True:
        exp_k = total * stats.geom.pmf(k, p)
        tail = total * stats.geom.sf(k, p)
        if tail < min_expected:
            observed.append(int(np.sum(data >= k)))
            expected.append(exp_k + tail)
            break
        observed.append(int(np.sum(data == k)))
        expected.append(exp_k)
        k += 1
    obs = np.asarray(observed, dtype=float)
    exp = np.asarray(expected, dtype=float)
    exp *= obs.sum() / exp.sum()
    dof = len(obs) - 1
    if dof < 1:
        return GeometricFit(p=p, chi2=0.0, p_value=1.0, dof=0, mean=float(data.mean()))
    chi2, p_value = stats.chisquare(obs, exp)
    return GeometricFit(p=p, chi2=float(chi2), p_value=float(p_value), dof=dof, mean=float(data.mean()))


def survival(rounds: Sequence[int], horizon: int) -> np.ndarray:
    """S[r] = 决定轮次 > r 的运行比例，r = 0..horizon"""
    data = np.asarray(rounds, dtype=int)
    return np.array([(data > r).mean() if data.size else 0.0 for r in range(horizon + 1)])


def survival_decay_rate(rounds: Sequence[int], start: int = 2, stop: int = 20) -> Optional[float]:
    """
    在 r ∈ [start, stop] 上对 log S(r) 做线性拟合，返回每轮的衰减因子

    生存比例为 0 的轮次不参与拟合；可用点少于 2 个时返回 None。
    """
    surv = survival(rounds, stop)
    rs = np.arange(start, stop + 1)
    values = surv[start: stop + 1]
    mask = values > 0
    if mask.sum() < 2:
        return None
    fit = stats.linregress(rs[mask], np.log(values[mask]))
    return float(np.exp(fit.slope))


def summarize(rounds: Sequence[int]) -> Dict[str, float]:
    data = np.asarray(rounds, dtype=float)
    if data.size == 0:
        return {}
    return {
        "mean": float(data.mean()),
        "std": float(data.std(ddof=1)) if data.size > 1 else 0.0,
        "p50": float(np.percentile(data, 50)),
        "p95": float(np.percentile(data, 95)),
        "max": float(data.max()),
    }


def within_sigma(count: int, total: int, p: float, k: float = 3.0) -> bool:
    """二项频率 count/total 是否落在 p 的 k 倍标准差以内"""
    if total <= 0:
        return False
    sigma = np.sqrt(p * (1 - p) / total)
    return abs(count / total - p) <= k * sigma + 1e-12
