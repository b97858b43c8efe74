"""
通用工具模块

包含协议取值常量、模式名称常量、消息值编码、提案解析以及 trace 摘要等共用功能
"""

import json
from typing import Any, Iterable, List, Optional, Union

# 协议取值：二进制值 0/1，外加 weak 算法第二阶段使用的 ⊥
BOT = 2
BINARY_VALUES = (0, 1)
EST_VALUES = (0, 1, BOT)

# 算法常量
ALGO_WEAK = "weak"            # 基线模式
ALGO_WEAK_OPT = "weak-opt"    # 减少广播次数的优化模式
ALGO_STRONG = "strong"        # t+1 强公共硬币算法
ALGORITHMS = (ALGO_WEAK, ALGO_WEAK_OPT, ALGO_STRONG)

# 调度器常量
SCHED_FIFO = "fifo"
SCHED_LIFO = "lifo"
SCHED_RANDOM = "random"
SCHED_DELAY_TARGET = "delay-target"
SCHEDULERS = (SCHED_FIFO, SCHED_RANDOM, SCHED_DELAY_TARGET, SCHED_LIFO)

# 拜占庭策略常量
BYZ_CRASH = "crash"
BYZ_MUTE = "mute"
BYZ_EQUIVOCATE = "equivocate"
BYZ_MIRROR = "mirror"
BYZ_SCRIPTED = "scripted"
BYZANTINE_STRATEGIES = (BYZ_CRASH, BYZ_MUTE, BYZ_EQUIVOCATE, BYZ_MIRROR, BYZ_SCRIPTED)

# view 选择方式
VIEW_UNION = "union"                # 达到阈值瞬间所有有效条目的并集
VIEW_FIRST_QUORUM = "first-quorum"  # 按投递顺序取前 n-t 个有效条目
VIEW_SELECTIONS = (VIEW_UNION, VIEW_FIRST_QUORUM)

# 64 位 FNV-1a
FNV_OFFSET_64 = 0xCBF29CE484222325
FNV_PRIME_64 = 0x100000001B3
_MASK_64 = 0xFFFFFFFFFFFFFFFF


def is_binary(value: Any) -> bool:
    """判断是否为二进制值 0/1"""
    return value in BINARY_VALUES and not isinstance(value, bool)


def is_est_value(value: Any) -> bool:
    """判断是否为 {0, 1, ⊥} 中的取值"""
    return value in EST_VALUES and not isinstance(value, bool)


def negate(value: int) -> int:
    """二进制取反"""
    if not is_binary(value):
        raise ValueError(f"只能对二进制值取反: {value!r}")
    return 1 - value


def sorted_values(values: Iterable[int]) -> List[int]:
    """按 0 < 1 < ⊥ 的固定顺序排序，保证输出稳定"""
    return sorted(values)


def encode_value(value: int) -> Union[int, str]:
    """编码单个取值，⊥ 编码为字符串 "bot" """
    return "bot" if value == BOT else value


def decode_value(raw: Any) -> int:
    """解码单个取值；非法输入原样返回，由接收方判定为畸形消息"""
    if raw == "bot":
        return BOT
    return raw


def encode_values(values: Iterable[int]) -> List[Union[int, str]]:
    return [encode_value(v) for v in sorted_values(values)]


def parse_proposals(text: str, n: Optional[int] = None) -> List[int]:
    """
    解析提案参数

    支持显式列表 "1,1,0,1" 以及简写 "<v>x<k>"，例如 "1x7"；
    两种写法可以混用："1x3,0"。

    Args:
        text: 命令行传入的提案字符串
        n: 期望的提案个数，None 表示不校验

    Returns:
        List[int]: 每个进程的二进制提案
    """
    result: List[int] = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        if "x" in part:
            value_str, count_str = part.split("x", 1)
            value, count = int(value_str), int(count_str)
            if count < 0:
                raise ValueError(f"重复次数不能为负: {part}")
            result.extend([value] * count)
        else:
            result.append(int(part))
    for v in result:
        if not is_binary(v):
            raise ValueError(f"提案只能是 0 或 1: {v}")
    if n is not None and len(result) != n:
        raise ValueError(f"提案个数 {len(result)} 与进程数 {n} 不一致")
    return result


def canonical_json(obj: Any) -> str:
    """固定字段顺序、无多余空白的 JSON 文本，用于 trace 与摘要"""
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def fnv1a_64(data: bytes, h: int = FNV_OFFSET_64) -> int:
    """
    64 位 FNV-1a 哈希，可传入上一段的结果做流式累积

    Args:
        data: 字节串
        h: 初始哈希值

    Returns:
        int: 64 位哈希
    """
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME_64) & _MASK_64
    return h


def format_digest(h: int) -> str:
    return f"{h:016x}"
