"""
离散事件模拟器测试
"""

from dataclasses import replace

import pytest

from coinsensus.core.analysis import summarize, survival_decay_rate
from coinsensus.core.coin_oracle import SPLIT_ESTIMATE_OPPOSING
from coinsensus.core.common_utils import (
    ALGO_STRONG,
    ALGO_WEAK,
    ALGO_WEAK_OPT,
    ALGORITHMS,
    BYZ_CRASH,
    BYZ_EQUIVOCATE,
    BYZ_MIRROR,
    BYZ_SCRIPTED,
    SCHED_DELAY_TARGET,
    SCHED_FIFO,
    SCHED_LIFO,
    VIEW_FIRST_QUORUM,
)
from coinsensus.core.protocol_core import ConfigError, InvalidParams
from coinsensus.core.simnet import RunConfig, read_trace, run, write_trace


class TestRunConfig:
    """测试运行配置校验"""

    def test_defaults_valid(self):
        params = RunConfig().validate()
        assert params.n_minus_t == 3

    def test_wrong_proposal_count(self):
        with pytest.raises(ConfigError):
            RunConfig(proposals=(1, 1, 1)).validate()

    def test_strong_needs_strong_coin(self):
        with pytest.raises(ConfigError):
            RunConfig(algorithm=ALGO_STRONG, coin_kind="weak").validate()
        assert RunConfig(algorithm=ALGO_STRONG).resolved_coin_kind == "strong"

    def test_resilience(self):
        with pytest.raises(InvalidParams):
            RunConfig(n=6, t=2, proposals=(1,) * 6).validate()

    def test_byzantine_on_correct_process(self):
        with pytest.raises(ConfigError):
            RunConfig(byzantine_by_pid={0: BYZ_MIRROR}).validate()

    def test_unknown_names(self):
        with pytest.raises(ConfigError):
            RunConfig(scheduler="round-robin").validate()
        with pytest.raises(ConfigError):
            RunConfig(byzantine="sleepy").validate()
        with pytest.raises(ConfigError):
            RunConfig(coin_d=1).validate()

    def test_from_dict(self):
        cfg = RunConfig.from_dict({"proposals": "1x3,0", "seed": 5, "byzantine_by_pid": {"3": "mirror"}})
        assert cfg.proposals == (1, 1, 1, 0)
        assert cfg.seed == 5
        assert cfg.byzantine_by_pid == {3: "mirror"}

    def test_from_dict_overrides_base(self):
        base = RunConfig(algorithm=ALGO_WEAK_OPT, seed=9)
        cfg = RunConfig.from_dict({"seed": 2}, base=base)
        assert cfg.algorithm == ALGO_WEAK_OPT
        assert cfg.seed == 2

    def test_from_dict_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"rounds": 3})


class TestUnanimousRuns:
    """全体提议同一个值"""

    @pytest.mark.parametrize("byz", [BYZ_CRASH, BYZ_EQUIVOCATE, BYZ_MIRROR])
    @pytest.mark.parametrize("algo", [ALGO_WEAK, ALGO_WEAK_OPT])
    def test_weak_round_one(self, algo, byz):
        cfg = RunConfig(n=7, t=2, algorithm=algo, proposals=(1,) * 7, byzantine=byz, seed=3)
        result = run(cfg)
        assert result.ok
        assert result.decision_round == 1
        assert {v for v, _ in result.decisions.values()} == {1}
        assert len(result.decisions) == 5

    def test_strong_decides_proposed_value(self):
        result = run(RunConfig(algorithm=ALGO_STRONG, proposals=(0, 0, 0, 0), seed=4))
        assert result.ok
        assert {v for v, _ in result.decisions.values()} == {0}

    def test_round_one_broadcast_count(self):
        """基线模式第 1 轮每个进程恰好 5 次广播"""
        result = run(RunConfig(seed=1))
        metered = result.metered_counts()
        assert all(metered[(pid, 1)] == 5 for pid in (0, 1, 2))


class TestMixedRuns:
    """分裂提案下的安全性与终止"""

    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("algo", ALGORITHMS)
    def test_agreement(self, algo, seed):
        cfg = RunConfig(algorithm=algo, proposals=(0, 1, 1, 0), byzantine=BYZ_EQUIVOCATE, seed=seed)
        result = run(cfg)
        assert result.safety_ok, result.violations
        assert not result.timed_out
        assert len({v for v, _ in result.decisions.values()}) == 1

    @pytest.mark.parametrize("algo", ALGORITHMS)
    def test_first_quorum_view(self, algo):
        cfg = RunConfig(n=7, t=2, algorithm=algo, proposals=(0, 1, 0, 1, 0, 1, 0),
                        view_selection=VIEW_FIRST_QUORUM, byzantine=BYZ_MIRROR, seed=11)
        assert run(cfg).ok

    @pytest.mark.parametrize("sched", [SCHED_FIFO, SCHED_LIFO, SCHED_DELAY_TARGET])
    def test_schedulers_respect_cap(self, sched):
        cfg = RunConfig(algorithm=ALGO_WEAK_OPT, proposals=(1, 0, 1, 0), scheduler=sched, delay_cap=6, seed=2)
        result = run(cfg)
        assert result.max_lag <= 6
        assert result.ok

    def test_zero_cap_is_fifo(self):
        a = run(RunConfig(proposals=(1, 0, 0, 1), delay_cap=0, seed=5))
        b = run(RunConfig(proposals=(1, 0, 0, 1), scheduler=SCHED_FIFO, delay_cap=0, seed=5))
        assert a.max_lag == 0
        assert a.decisions == b.decisions


class TestDeterminism:
    """相同配置得到相同 trace"""

    def test_same_digest(self):
        cfg = RunConfig(algorithm=ALGO_WEAK, proposals=(0, 1, 1, 0), byzantine=BYZ_EQUIVOCATE, seed=21)
        a, b = run(cfg), run(cfg)
        assert a.trace_digest == b.trace_digest
        assert len(a.trace_digest) == 16
        assert a.decisions == b.decisions
        assert a.total_events == b.total_events

    def test_trace_records(self, tmp_path):
        cfg = RunConfig(proposals=(1, 1, 0, 1), seed=8, record_trace=True)
        result = run(cfg)
        assert result.trace[0].kind == "header"
        kinds = {rec.kind for rec in result.trace}
        assert {"broadcast", "deliver", "coin-request", "coin-reveal", "decide"} <= kinds
        path = write_trace(result, tmp_path / "out" / "trace.jsonl")
        records = read_trace(path)
        assert len(records) == len(result.trace)
        assert records[0]["payload"]["config"]["seed"] == 8

    def test_digest_independent_of_recording(self):
        """是否保留 trace 不影响摘要"""
        cfg = RunConfig(proposals=(1, 0, 1, 1), seed=13)
        a = run(cfg)
        b = run(RunConfig(proposals=(1, 0, 1, 1), seed=13, record_trace=True))
        assert a.trace_digest == b.trace_digest


class TestLimits:
    """测试超时与拜占庭脚本"""

    def test_event_cap(self):
        result = run(RunConfig(proposals=(1, 0, 1, 0), max_events=10))
        assert result.timed_out
        assert not result.ok
        assert result.total_events == 10
        assert result.safety_ok

    def test_scripted_malformed_dropped(self):
        script = [{"from": 3, "to": [0], "msg": {"kind": "AUXSET", "tag": {"round": 1}, "value": []}}]
        cfg = RunConfig(byzantine=BYZ_SCRIPTED, script=script, seed=1)
        result = run(cfg)
        assert result.ok
        assert result.dropped >= 1

    def test_scripted_sender_is_faulty_pid(self):
        """脚本里冒用正确进程编号的消息仍算作 p3 发出，凑不齐 t+1 个来源"""
        script = []
        for forged in (0, 1, 2):
            script += [
                {"from": 3, "msg": {"kind": "BVAL", "tag": {"round": 1, "phase": 0}, "value": 0, "sender": forged}},
                {"from": 3, "msg": {"kind": "AUX", "tag": {"round": 1, "phase": 0}, "value": 0, "sender": forged}},
                {"from": 3, "msg": {"kind": "AUXSET", "tag": {"round": 1}, "value": [0], "sender": forged}},
            ]
        cfg = RunConfig(algorithm=ALGO_WEAK, proposals=(1, 1, 1, 1), scheduler=SCHED_FIFO,
                        byzantine=BYZ_SCRIPTED, script=script, seed=0)
        result = run(cfg)
        assert result.ok, result.violations
        assert {v for v, _ in result.decisions.values()} == {1}

    def test_to_json(self):
        data = run(RunConfig(seed=2)).to_json()
        assert data["decision_round"] == 1
        assert data["safety_ok"] is True
        assert set(data["decisions"]) == {"0", "1", "2"}


class TestBroadcastCounts:
    """每个正确进程每轮的广播次数落在协议给出的区间内"""

    def _counts(self, algo, seeds):
        first, later = [], []
        for seed in seeds:
            cfg = RunConfig(algorithm=algo, proposals=(0, 1, 1, 0), byzantine=BYZ_EQUIVOCATE, seed=seed)
            result = run(cfg)
            assert result.safety_ok, result.violations
            for (_, r), count in result.metered_counts().items():
                (first if r == 1 else later).append(count)
        return first, later

    def test_weak_opt(self):
        first, later = self._counts(ALGO_WEAK_OPT, range(30))
        assert first and later
        assert all(5 <= c <= 6 for c in first)
        assert all(4 <= c <= 5 for c in later)

    def test_strong(self):
        first, later = self._counts(ALGO_STRONG, range(30))
        assert first and later
        assert all(2 <= c <= 3 for c in first)
        assert all(1 <= c <= 2 for c in later)


class TestCoinRecords:
    def test_one_record_per_revealed_round(self):
        cfg = RunConfig(algorithm=ALGO_STRONG, proposals=(0, 1, 1, 0), byzantine=BYZ_EQUIVOCATE,
                        seed=4, record_trace=True)
        result = run(cfg)
        coins = [rec.payload for rec in result.trace if rec.kind == "coin"]
        revealed = {rec.payload["round"] for rec in result.trace if rec.kind == "coin-reveal"}
        assert coins
        assert [c["round"] for c in coins] == sorted(revealed)
        for coin in coins:
            # 强硬币在所有进程上取值相同
            assert len(set(coin["assignment"].values())) == 1
            assert coin["outcome"] in ("all-0", "all-1")


class TestSeedSensitivity:
    def test_seed_changes_digest(self):
        for seed in range(20):
            cfg = RunConfig(algorithm=ALGO_WEAK, proposals=(0, 1, 1, 0), seed=seed)
            assert run(cfg).trace_digest != run(replace(cfg, seed=seed + 100)).trace_digest


@pytest.mark.slow
class TestRoundDistributions:
    """多种子统计：决定轮次的均值、分位数与生存比例衰减"""

    def test_strong_mixed_rounds(self):
        proposals = (0, 1, 0, 1, 0, 1, 0)
        rounds = []
        for seed in range(300):
            result = run(RunConfig(n=7, t=2, algorithm=ALGO_STRONG, proposals=proposals, seed=seed))
            assert result.ok
            rounds.append(result.decision_round)
        stats = summarize(rounds)
        assert stats["mean"] <= 4.5
        assert stats["p95"] <= 10

    def test_weak_adversarial_split_decay(self):
        d = 4
        proposals = (0, 1, 0, 1, 0, 1, 0)
        rounds = []
        for seed in range(600):
            cfg = RunConfig(n=7, t=2, algorithm=ALGO_WEAK, proposals=proposals, coin_d=d,
                            split_strategy=SPLIT_ESTIMATE_OPPOSING, seed=seed)
            result = run(cfg)
            assert result.ok
            rounds.append(result.decision_round)
        rate = survival_decay_rate(rounds, start=2, stop=20)
        assert rate is not None
        assert rate <= (1 - 1 / d) + 0.05
