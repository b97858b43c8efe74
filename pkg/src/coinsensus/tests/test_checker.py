"""
小模型穷举检查器测试
"""

import time

import pytest

from coinsensus.core.bv_broadcast import BvState, bv_init
from coinsensus.core.checker import (
    BV_PROPERTIES,
    MONOTONICITY,
    S_PROPERTIES,
    SBV_PROPERTIES,
    DeliveryOrder,
    _byzantine_messages,
    _Explorer,
    property_names,
    run_check,
    symmetry_group,
)
from coinsensus.core.protocol_core import Aux, Bval, ConfigError, StageTag, validate_params
from coinsensus.core.sbv_broadcast import sbv_init

TAG = StageTag(1, 0)


@pytest.fixture
def params():
    return validate_params(4, 1)


class TestBvCheck:
    """BV-broadcast 全部交错"""

    @pytest.mark.parametrize("byz", ["none", "equivocate"])
    def test_unanimous(self, byz):
        report = run_check("bv", inputs=(1, 1, 1), byzantine=byz)
        assert report.ok, report.counterexample
        assert report.terminal >= 1
        assert set(report.properties) == set(BV_PROPERTIES)
        assert all(t["fail"] == 0 for t in report.properties.values())

    def test_split_inputs(self):
        report = run_check("bv", inputs=(0, 1, 1), byzantine="none")
        assert report.ok, report.counterexample

    def test_to_json(self):
        data = run_check("bv", inputs=(0, 0, 0), byzantine="none").to_json()
        assert data["ok"] is True
        assert data["inputs"] == {"inputs": [0, 0, 0]}
        assert data["counterexample"] is None
        assert data["reduction"] is True
        assert data["symmetry"] == 6


class TestSbcCheck:
    """S-Broadcast 全部交错"""

    def test_two_initiators(self):
        report = run_check("sbc", inputs_true=(1, 1), inputs_false=(0,), byzantine="none")
        assert report.ok, report.counterexample
        assert set(report.properties) == set(S_PROPERTIES)
        assert report.inputs == {"true": [1, 1], "false": [0]}

    def test_flood(self):
        report = run_check("sbc", inputs_true=(1, 1), inputs_false=(0,), byzantine="flood")
        assert report.ok, report.counterexample


class TestSbvCheck:
    """SBV-broadcast：带拜占庭注入时也要在一分钟内跑完"""

    def test_unanimous(self):
        report = run_check("sbv", inputs=(1, 1, 1), byzantine="none")
        assert report.ok, report.counterexample
        assert set(report.properties) == set(SBV_PROPERTIES)

    @pytest.mark.parametrize("inputs", [(0, 1, 0), (1, 1, 1)])
    def test_equivocate_finishes(self, inputs):
        started = time.perf_counter()
        report = run_check("sbv", inputs=inputs, byzantine="equivocate")
        elapsed = time.perf_counter() - started
        assert report.ok, (report.failed, report.counterexample)
        assert not report.truncated
        assert all(t["fail"] == 0 for t in report.properties.values())
        assert elapsed < 60

    def test_split_inputs_without_byzantine(self):
        report = run_check("sbv", inputs=(0, 1, 1), byzantine="none")
        assert report.ok, report.counterexample


class TestReduction:
    """归约前后的检查结论一致，且归约只会减少状态数"""

    def test_sbc_matches_full_search(self):
        kwargs = dict(inputs_true=(1, 1), inputs_false=(0,), byzantine="equivocate")
        reduced = run_check("sbc", **kwargs)
        full = run_check("sbc", reduction=False, **kwargs)
        assert reduced.ok and full.ok
        assert full.symmetry == 1
        assert reduced.explored < full.explored
        assert set(reduced.properties) == set(full.properties)

    @pytest.mark.slow
    def test_bv_matches_full_search(self):
        reduced = run_check("bv", inputs=(0, 1, 1), byzantine="none")
        full = run_check("bv", inputs=(0, 1, 1), byzantine="none", reduction=False)
        assert reduced.ok and full.ok
        assert reduced.explored < full.explored

    def test_symmetry_group_respects_signature(self):
        assert len(symmetry_group([0, 1, 2], {0: "a", 1: "a", 2: "a"})) == 6
        group = symmetry_group([0, 1, 2], {0: "a", 1: "b", 2: "a"})
        assert len(group) == 2
        assert all(perm[1] == 1 and perm[3] == 3 for perm in group)

    def test_reachable_bin_values(self, params):
        honest = [0, 1, 2]
        injections = _byzantine_messages("sbv", "equivocate", honest)
        order = DeliveryOrder("sbv", params, honest, (0, 1, 0), injections)
        # 只有 p1 收到拜占庭的 BVAL(1)，凑不齐 2t+1 个来源
        assert order.binposs == {0: frozenset({0}), 1: frozenset({0}), 2: frozenset({0})}
        assert order.byz_aux == {0: {0}, 1: {1}, 2: {0}}

    def test_inert_messages(self, params):
        honest = [0, 1, 2]
        injections = _byzantine_messages("sbv", "flood", honest)
        order = DeliveryOrder("sbv", params, honest, (0, 1, 1), injections)
        state, _ = sbv_init(params, 0, TAG, 0)
        # 拜占庭进程可以向 p0 送出两个不同的 AUX，且两个值都可能进入 bin_values
        assert not order.order_free(0, state)
        assert not order.inert(0, state, Aux(TAG, 1, 3))
        state.bv.on_bval(1, 1)
        assert order.inert(0, state, Bval(TAG, 1, 1))
        assert not order.inert(0, state, Bval(TAG, 1, 2))

    def test_bv_and_sbc_are_order_free(self, params):
        state, _ = bv_init(params, 0, TAG, 1)
        assert DeliveryOrder("bv", params, [0, 1, 2], (1, 1, 1), []).order_free(0, state)


class TestMonotonicity:
    def test_shrinking_bin_values_is_reported(self, params):
        explorer = _Explorer([0, 1, 2], lambda s: {}, 10, [{0: 0, 1: 1, 2: 2, 3: 3}], None)
        old = BvState(params=params, pid=0, tag=TAG, bin_values=[1])
        new = old.clone()
        new.bin_values.clear()
        assert old.bin_values == [1]
        explorer._check_monotone(old, new, ["deliver BVAL(1) from p1 to p0"])
        assert explorer.failure == (MONOTONICITY, ["deliver BVAL(1) from p1 to p0"])


class TestCheckArguments:
    """测试参数校验与截断"""

    def test_unknown_target(self):
        with pytest.raises(ConfigError):
            run_check("abba", inputs=(1, 1, 1))

    def test_unknown_byzantine(self):
        with pytest.raises(ConfigError):
            run_check("bv", inputs=(1, 1, 1), byzantine="loud")

    def test_wrong_inputs(self):
        with pytest.raises(ConfigError):
            run_check("bv", inputs=(1, 1))
        with pytest.raises(ConfigError):
            run_check("sbv", inputs=(1, 2, 1))
        with pytest.raises(ConfigError):
            run_check("sbc", inputs_true=(1, 1), inputs_false=(0, 0))

    def test_truncated(self):
        report = run_check("bv", inputs=(1, 1, 1), byzantine="none", max_states=1)
        assert report.truncated
        assert not report.ok

    def test_property_names(self):
        assert property_names("bv") == BV_PROPERTIES
        assert property_names("sbc") == S_PROPERTIES
