"""
S-Broadcast 单元测试
"""

import pytest

from coinsensus.core.common_utils import BOT
from coinsensus.core.protocol_core import (
    Broadcast,
    Deliver,
    DuplicateInit,
    EstTag,
    ProtocolViolation,
    StageTag,
    Sval,
    SvalueTrue,
    TagError,
    validate_params,
)
from coinsensus.core.s_broadcast import s_init, s_on_sval

TAG = EstTag(1)


@pytest.fixture
def params():
    return validate_params(4, 1)


class TestSInit:
    """测试实例启动"""

    def test_should_broadcast(self, params):
        state, effects, handle = s_init(params, 0, TAG, 1, True)
        assert effects == [Broadcast(Sval(TAG, 1, 0))]
        assert state.broadcast_done
        assert not handle.value
        assert handle.tag == TAG

    def test_silent(self, params):
        state, effects, _ = s_init(params, 0, TAG, 0, False)
        assert effects == []
        assert state.started
        assert not state.broadcast_done

    def test_stage_tag_rejected(self, params):
        with pytest.raises(TagError):
            s_init(params, 0, StageTag(1, 0), 1, True)

    def test_bot_rejected(self, params):
        with pytest.raises(ProtocolViolation):
            s_init(params, 0, TAG, BOT, True)

    def test_duplicate(self, params):
        state, _, _ = s_init(params, 0, TAG, 1, False)
        with pytest.raises(DuplicateInit):
            state.start(True)


class TestSThresholds:
    """测试 t+1 回显与 2t+1 翻转标志"""

    def test_silent_instance_echoes(self, params):
        state, _, handle = s_init(params, 0, TAG, 1, False)
        _, effects = s_on_sval(state, 1, 1)
        assert effects == []
        _, effects = s_on_sval(state, 2, 1)
        assert effects == [Broadcast(Sval(TAG, 1, 0))]
        _, effects = s_on_sval(state, 3, 1)
        assert effects == [SvalueTrue(TAG, 1)]
        assert handle.value
        assert bool(handle)

    def test_no_echo_after_own_broadcast(self, params):
        state, _, handle = s_init(params, 0, TAG, 1, True)
        s_on_sval(state, 0, 1)
        _, effects = s_on_sval(state, 1, 1)
        assert effects == []
        _, effects = s_on_sval(state, 2, 1)
        assert effects == [SvalueTrue(TAG, 1)]

    def test_other_value_dropped(self, params):
        state, _, handle = s_init(params, 0, TAG, 1, False)
        for sender in (1, 2, 3):
            s_on_sval(state, sender, 0)
        assert state.dropped == 3
        assert not handle

    def test_wrong_round_dropped(self, params):
        state, _, _ = s_init(params, 0, TAG, 1, False)
        state.handle(Deliver(Sval(EstTag(2), 1, 1)))
        assert state.dropped == 1
        assert state.senders == set()

    def test_duplicate_sender(self, params):
        state, _, handle = s_init(params, 0, TAG, 1, False)
        for _ in range(3):
            s_on_sval(state, 1, 1)
        assert state.senders == {1}
        assert not handle
