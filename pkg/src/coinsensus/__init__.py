"""
coinsensus

异步拜占庭二进制共识的随机化算法、通信抽象与确定性模拟器
"""

__version__ = "0.1.0"
