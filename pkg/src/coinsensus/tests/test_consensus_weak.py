"""
weak 共识状态机测试

小型本地网络：n=4, t=1，p3 崩溃，其余三个进程按 FIFO 互发消息，硬币由测试给定。
"""

from collections import deque

import pytest

from coinsensus.core.common_utils import ALGO_WEAK, ALGO_WEAK_OPT, BOT
from coinsensus.core.consensus_weak import WeakConsensus, w_on_auxset, w_on_coin, w_propose
from coinsensus.core.protocol_core import (
    Aux,
    AuxSet,
    Broadcast,
    Bval,
    CoinValue,
    Decide,
    Deliver,
    DuplicateProposal,
    ProtocolViolation,
    RequestCoin,
    StageTag,
    Start,
    step,
    validate_params,
)


@pytest.fixture
def params():
    return validate_params(4, 1)


def run_local(params, proposals, coin, mode=ALGO_WEAK, max_steps=20000):
    """
    在正确进程之间按 FIFO 投递，直到全部决定

    Returns:
        (进程字典, 全部广播消息列表)
    """
    procs = {pid: WeakConsensus(params=params, pid=pid, mode=mode) for pid in sorted(params.non_faulty)}
    queue = deque()
    sent = []

    def apply(pid, effects):
        work = deque((pid, e) for e in effects)
        while work:
            owner, effect = work.popleft()
            if isinstance(effect, Broadcast):
                sent.append(effect.msg)
                queue.extend((p, effect.msg) for p in procs)
            elif isinstance(effect, RequestCoin):
                out = procs[owner].handle(CoinValue(effect.round, coin(effect.round)))
                work.extend((owner, e) for e in out)

    for pid, proc in procs.items():
        apply(pid, proc.handle(Start(proposals[pid])))
    steps = 0
    while queue and steps < max_steps and not all(p.decided for p in procs.values()):
        recipient, msg = queue.popleft()
        apply(recipient, procs[recipient].handle(Deliver(msg)))
        steps += 1
    return procs, sent


class TestWeakPropose:
    """测试提案入口"""

    def test_first_broadcast(self, params):
        state, effects = w_propose(params, 0, 1)
        assert effects == [Broadcast(Bval(StageTag(1, 0), 1, 0))]
        assert state.r == 1
        assert state.round_start_est == {1: 1}

    def test_duplicate(self, params):
        state, _ = w_propose(params, 0, 1)
        with pytest.raises(DuplicateProposal):
            state.propose(0)

    def test_non_binary(self, params):
        with pytest.raises(ProtocolViolation) as exc:
            w_propose(params, 0, BOT)
        assert exc.value.check == "binary-proposal"


class TestWeakMessages:
    """测试消息分派"""

    def test_malformed_auxset_dropped(self, params):
        state, _ = w_propose(params, 0, 1)
        _, effects = w_on_auxset(state, 3, 1, ())
        assert effects == []
        assert state.dropped == 1

    def test_future_stage_buffered(self, params):
        state, _ = w_propose(params, 0, 1)
        effects = state.handle(Deliver(Bval(StageTag(3, 0), 1, 2)))
        assert effects == []
        assert len(state.buffer) == 1

    def test_auxset_first_per_sender(self, params):
        state, _ = w_propose(params, 0, 1)
        w_on_auxset(state, 1, 1, {1})
        w_on_auxset(state, 1, 1, {0})
        assert state.auxset_received[1] == {1: frozenset({1})}

    def test_early_coin_kept(self, params):
        state, _ = w_propose(params, 0, 1)
        _, effects = w_on_coin(state, 1, 0)
        assert effects == []
        assert state.coin_values == {1: 0}

    def test_step_is_pure(self, params):
        state, _ = w_propose(params, 0, 1)
        event = Deliver(Aux(StageTag(1, 0), 1, 2))
        new_a, eff_a = step(state, event)
        new_b, eff_b = step(state, event)
        assert eff_a == eff_b
        assert state.stages[StageTag(1, 0)].aux_received == {}
        assert new_a.stages[StageTag(1, 0)].aux_received == {2: 1}


class TestWeakRoundEnd:
    """测试 view2 与硬币汇合后的决定/采纳规则"""

    def test_single_value_decides(self, params):
        state, _ = w_propose(params, 0, 0)
        effects = state.on_view2_and_coin(1, frozenset({0}), 1)
        assert Decide(0, 1) in effects
        assert state.decided == (0, 1)
        assert state.est == 0
        assert state.r == 2

    def test_value_and_bot_adopts(self, params):
        state, _ = w_propose(params, 0, 0)
        effects = state.on_view2_and_coin(1, frozenset({1, BOT}), 0)
        assert not any(isinstance(e, Decide) for e in effects)
        assert state.est == 1
        assert Broadcast(Bval(StageTag(2, 0), 1, 0)) in effects

    def test_bot_only_takes_coin(self, params):
        state, _ = w_propose(params, 0, 1)
        state.on_view2_and_coin(1, frozenset({BOT}), 0)
        assert state.est == 0
        assert state.completed_rounds == 1
        assert state.round_start_est[2] == 0

    def test_two_binary_values_rejected(self, params):
        state, _ = w_propose(params, 0, 1)
        with pytest.raises(ProtocolViolation) as exc:
            state.on_view2_and_coin(1, frozenset({0, 1}), 0)
        assert exc.value.check == "one-sided-phase1"


class TestWeakLocalNetwork:
    """三个正确进程的完整轮次"""

    @pytest.mark.parametrize("mode", [ALGO_WEAK, ALGO_WEAK_OPT])
    def test_unanimous_decides_round_one(self, params, mode):
        procs, _ = run_local(params, {0: 1, 1: 1, 2: 1}, coin=lambda r: 0, mode=mode)
        assert all(p.decided == (1, 1) for p in procs.values())

    def test_majority_value_wins(self, params):
        """只有一个进程提议 0 时，0 达不到 t+1，不会进入 bin_values"""
        procs, _ = run_local(params, {0: 1, 1: 1, 2: 0}, coin=lambda r: 0)
        assert all(p.decided == (1, 1) for p in procs.values())
        assert all(p.views[(1, 0)] == frozenset({1}) for p in procs.values())

    def test_baseline_round_two_bval(self, params):
        _, sent = run_local(params, {0: 1, 1: 1, 2: 1}, coin=lambda r: 1)
        round2 = [m for m in sent if isinstance(m, Bval) and m.tag == StageTag(2, 0)]
        assert sorted(m.sender for m in round2) == [0, 1, 2]

    def test_optimized_skips_round_two_bval(self, params):
        """上一阶段已证明的估计值不再广播 BVAL，直接广播 AUX"""
        _, sent = run_local(params, {0: 1, 1: 1, 2: 1}, coin=lambda r: 1, mode=ALGO_WEAK_OPT)
        tag = StageTag(2, 0)
        assert not [m for m in sent if isinstance(m, Bval) and m.tag == tag]
        assert sorted(m.sender for m in sent if isinstance(m, Aux) and m.tag == tag) == [0, 1, 2]

    def test_auxset_broadcast_once_per_round(self, params):
        _, sent = run_local(params, {0: 1, 1: 0, 2: 1}, coin=lambda r: 1)
        auxsets = [m for m in sent if isinstance(m, AuxSet) and m.round == 1]
        assert sorted(m.sender for m in auxsets) == [0, 1, 2]
