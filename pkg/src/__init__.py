"""
coinsensus 源码目录
"""
