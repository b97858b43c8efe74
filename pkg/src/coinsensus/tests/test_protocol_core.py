"""
协议核心与通用工具的单元测试
"""

import pytest
from hypothesis import given, settings, strategies as st

from coinsensus.core.bv_broadcast import BvState, bv_init
from coinsensus.core.common_utils import (
    BOT,
    FNV_OFFSET_64,
    canonical_json,
    fnv1a_64,
    format_digest,
    negate,
    parse_proposals,
)
from coinsensus.core.protocol_core import (
    Aux,
    AuxBin,
    AuxSet,
    Bval,
    ConfigError,
    Deliver,
    EarlyBuffer,
    EstTag,
    InvalidParams,
    StageTag,
    Sval,
    TagError,
    is_well_formed,
    message_from_json,
    step,
    tag_order,
    validate_params,
)


@pytest.fixture
def params():
    return validate_params(4, 1)


class TestSystemParams:
    """测试系统参数校验"""

    def test_quorums(self, params):
        """测试三个法定人数"""
        assert params.t_plus_1 == 2
        assert params.two_t_plus_1 == 3
        assert params.n_minus_t == 3
        assert params.non_faulty == frozenset({0, 1, 2})
        assert params.faulty == frozenset({3})

    def test_resilience_bound(self):
        """t >= n/3 必须拒绝"""
        with pytest.raises(InvalidParams):
            validate_params(3, 1)
        with pytest.raises(InvalidParams):
            validate_params(6, 2)
        assert validate_params(7, 2).n_minus_t == 5

    def test_non_faulty_too_small(self):
        """正确进程少于 n-t 时拒绝"""
        with pytest.raises(InvalidParams):
            validate_params(7, 2, non_faulty=[0, 1, 2])

    def test_non_faulty_out_of_range(self):
        with pytest.raises(InvalidParams):
            validate_params(4, 1, non_faulty=[0, 1, 9])

    def test_custom_non_faulty(self):
        p = validate_params(4, 1, non_faulty=[1, 2, 3])
        assert p.faulty == frozenset({0})


class TestTags:
    """测试实例标签的全序"""

    def test_round_then_phase(self):
        assert tag_order(StageTag(1, 1), StageTag(2, 0)) == -1
        assert tag_order(StageTag(2, 0), StageTag(1, 1)) == 1
        assert tag_order(StageTag(3, 1), StageTag(3, 1)) == 0
        assert tag_order(EstTag(2), EstTag(5)) == -1

    def test_cross_variant(self):
        """Stage 与 Est 标签不可比较"""
        with pytest.raises(TagError):
            tag_order(StageTag(1, 0), EstTag(1))


class TestMessages:
    """测试消息格式约束与编码"""

    def test_phase0_rejects_bot(self, params):
        assert not is_well_formed(Bval(StageTag(1, 0), BOT, 1), params)
        assert is_well_formed(Bval(StageTag(1, 1), BOT, 1), params)
        assert is_well_formed(Aux(StageTag(2, 1), BOT, 3), params)

    def test_bad_sender(self, params):
        assert not is_well_formed(Bval(StageTag(1, 0), 1, 4), params)
        assert not is_well_formed(Sval(EstTag(1), 1, -1), params)

    def test_auxset_values(self, params):
        """AUXSET 必须是 {0,1} 的非空子集"""
        assert not is_well_formed(AuxSet(1, frozenset(), 0), params)
        assert not is_well_formed(AuxSet(1, frozenset({BOT}), 0), params)
        assert is_well_formed(AuxSet(1, frozenset({0, 1}), 0), params)

    def test_auxbin_binary_only(self, params):
        assert is_well_formed(AuxBin(3, 0, 2), params)
        assert not is_well_formed(AuxBin(3, BOT, 2), params)
        assert not is_well_formed(AuxBin(0, 1, 2), params)

    def test_bot_encoding(self):
        """⊥ 在 trace 中编码为 "bot" 并能还原"""
        msg = Aux(StageTag(2, 1), BOT, 1)
        data = msg.to_json()
        assert data["value"] == "bot"
        assert message_from_json(data) == msg

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            message_from_json({"kind": "PING", "sender": 0})
        with pytest.raises(ConfigError):
            message_from_json({"kind": "BVAL", "sender": 0, "tag": {}})


class TestStep:
    """测试 step 的纯函数性质"""

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 1)), max_size=12))
    def test_original_untouched(self, deliveries):
        """step 不修改传入的状态，且相同输入得到相同输出"""
        params = validate_params(4, 1)
        state, _ = bv_init(params, 0, StageTag(1, 0), 1)
        for sender, value in deliveries:
            event = Deliver(Bval(StageTag(1, 0), value, sender))
            before = state.state_key()
            new_a, eff_a = step(state, event)
            new_b, eff_b = step(state, event)
            assert state.state_key() == before
            assert new_a.state_key() == new_b.state_key()
            assert eff_a == eff_b
            state = new_a

    def test_returns_new_object(self, params):
        state = BvState(params=params, pid=0, tag=StageTag(1, 0))
        new_state, _ = step(state, Deliver(Bval(StageTag(1, 0), 0, 1)))
        assert new_state is not state
        assert state.senders_of == {}


class TestEarlyBuffer:
    """测试提前到达消息的缓存"""

    def test_hold_and_release_in_order(self):
        buf = EarlyBuffer()
        a = Bval(StageTag(2, 0), 1, 0)
        b = Bval(StageTag(2, 0), 0, 1)
        buf.hold(a.tag, a)
        buf.hold(b.tag, b)
        assert len(buf) == 2
        assert buf.release(StageTag(2, 0)) == [a, b]
        assert buf.release(StageTag(2, 0)) == []
        assert len(buf) == 0

    def test_discard_below(self):
        buf = EarlyBuffer()
        buf.hold(EstTag(1), Sval(EstTag(1), 0, 3))
        buf.hold(EstTag(2), Sval(EstTag(2), 1, 3))
        assert buf.discard_below(lambda tag: tag.round <= 1) == 1
        assert len(buf) == 1


class TestCommonUtils:
    """测试通用工具函数"""

    def test_parse_proposals(self):
        assert parse_proposals("1,0,1") == [1, 0, 1]
        assert parse_proposals("1x3,0") == [1, 1, 1, 0]
        assert parse_proposals("0x2,1x2", 4) == [0, 0, 1, 1]

    def test_parse_proposals_errors(self):
        with pytest.raises(ValueError):
            parse_proposals("1,2")
        with pytest.raises(ValueError):
            parse_proposals("1x3", 4)

    def test_negate(self):
        assert negate(0) == 1
        assert negate(1) == 0
        with pytest.raises(ValueError):
            negate(BOT)

    def test_fnv1a(self):
        """64 位 FNV-1a 的标准测试向量"""
        assert fnv1a_64(b"") == FNV_OFFSET_64
        assert format_digest(fnv1a_64(b"a")) == "af63dc4c8601ec8c"

    def test_fnv1a_streaming(self):
        """分段累积与一次性计算结果相同"""
        whole = fnv1a_64(b"hello world")
        assert fnv1a_64(b" world", fnv1a_64(b"hello")) == whole

    def test_canonical_json(self):
        assert canonical_json({"a": 1, "b": [1, 2]}) == '{"a":1,"b":[1,2]}'
