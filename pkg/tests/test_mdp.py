"""Fleet MDP: masks, transitions, termination, rewards, solution files."""

import json
import math

import numpy as np
import pytest

from mmhcvrp import (
    Action,
    FileFormatError,
    GenConfig,
    ValidationError,
    action_mask,
    evaluate_solution,
    finalize_reward,
    generate_many,
    init_state,
    is_terminal,
    random_rollout,
    read_solution,
    step,
    write_solution,
)
from mmhcvrp.mdp import rollout_step_budget, solution_from_dict, solution_to_dict

from conftest import make_line_instance


def test_initial_state():
    inst = make_line_instance([0.5, 1.0], [3, 4], [10], [1.0])
    st = init_state(inst)
    assert not is_terminal(st)
    assert st.remaining.tolist() == [0, 3, 4]
    assert st.last_node.tolist() == [0]
    assert st.clock.tolist() == [0.0]
    assert st.used_capacity.tolist() == [0]


def test_mask_rules():
    # capacity 5: customer 2 (demand 6) never fits; depot masked while at depot
    inst = make_line_instance([0.2, 0.4], [3, 6], [5, 10], [1.0, 1.0])
    st = init_state(inst)
    mask = action_mask(st)
    assert mask.shape == (2, 3)
    assert not mask[0, 0] and not mask[1, 0]  # both at depot
    assert mask[0, 1] and mask[1, 1]
    assert not mask[0, 2] and mask[1, 2]  # demand 6 over vehicle 0's capacity

    st = step(st, Action(0, 1))  # vehicle 0 serves customer 1
    mask = action_mask(st)
    assert mask[0, 0]            # away from depot, reload now allowed
    assert not mask[0, 1] and not mask[1, 1]  # customer 1 exhausted
    assert not mask[0, 2]        # 6 > 5 - 3 remaining capacity


def test_step_arithmetic():
    inst = make_line_instance([0.5, 1.0], [3, 4], [10], [0.5])
    st = init_state(inst)
    st = step(st, Action(0, 1))
    assert st.clock[0] == pytest.approx(1.0)   # 0.5 distance at speed 0.5
    assert st.used_capacity[0] == 3
    assert st.last_node[0] == 1
    st = step(st, Action(0, 0))                # reload: 0.5 back at speed 0.5
    assert st.clock[0] == pytest.approx(2.0)
    assert st.used_capacity[0] == 0
    assert st.last_node[0] == 0
    st = step(st, Action(0, 2))
    assert st.clock[0] == pytest.approx(4.0)
    assert is_terminal(st)


def test_finalize_adds_return_leg():
    inst = make_line_instance([0.5, 1.0], [3, 4], [10], [1.0])
    st = init_state(inst)
    st = step(st, Action(0, 1))
    st = step(st, Action(0, 2))
    reward, sol = finalize_reward(st)
    # 0.5 out + 0.5 to customer 2 + 1.0 home
    assert sol.objective == pytest.approx(2.0)
    assert reward == -sol.objective
    assert sol.routes == ((1, 2),)


def test_finalize_requires_terminal():
    inst = make_line_instance([0.5], [3], [10], [1.0])
    with pytest.raises(ValidationError):
        finalize_reward(init_state(inst))


def test_step_rejects_masked_action():
    inst = make_line_instance([0.5], [3], [10], [1.0])
    st = init_state(inst)
    with pytest.raises(ValidationError):
        step(st, Action(0, 0))  # depot while at depot


def test_evaluate_solution_hand_cases():
    inst = make_line_instance([0.3], [1], [10], [1.0])
    assert evaluate_solution(inst, [(1,)]) == pytest.approx(0.6)

    inst2 = make_line_instance([0.3, -0.3], [1, 1], [10, 10], [0.5, 1.0])
    assert evaluate_solution(inst2, [(1,), (2,)]) == pytest.approx(1.2)


def test_evaluate_solution_validation_errors():
    inst = make_line_instance([0.3, 0.6], [4, 4], [5, 5], [1.0, 1.0])
    with pytest.raises(ValidationError, match="never visited"):
        evaluate_solution(inst, [(1,), ()])          # unserved
    with pytest.raises(ValidationError, match="customer 1"):
        evaluate_solution(inst, [(1,), (1, 2)])      # double visit
    with pytest.raises(ValidationError, match="capacity"):
        evaluate_solution(inst, [(1, 2), ()])        # 8 > 5 in one segment
    with pytest.raises(ValidationError):
        evaluate_solution(inst, [(1, 7), (2,)])      # unknown index
    with pytest.raises(ValidationError):
        evaluate_solution(inst, [(1,)])              # wrong route count


def test_reload_markers_split_capacity_segments():
    inst = make_line_instance([0.3, 0.6], [4, 4], [5, 5], [1.0, 1.0])
    obj = evaluate_solution(inst, [(1, 0, 2), ()])
    assert obj == pytest.approx(0.3 + 0.3 + 0.6 + 0.6)


def test_demand_conservation_and_termination_bound():
    rng = np.random.default_rng(5)
    for inst in generate_many(GenConfig(n_customers=9, n_vehicles=3), 10, base_seed=11):
        st = init_state(inst)
        budget = rollout_step_budget(inst)
        total = st.remaining.sum()
        while not is_terminal(st):
            assert st.step_count <= budget
            mask = action_mask(st)
            pairs = np.argwhere(mask)
            i, j = pairs[rng.integers(len(pairs))]
            before = st.remaining[j]
            st = step(st, Action(int(i), int(j)))
            if j != 0:
                assert st.remaining[j] == 0
                total -= before
            assert st.remaining.sum() == total


def test_reward_matches_evaluator():
    rng = np.random.default_rng(17)
    for inst in generate_many(GenConfig(n_customers=8, n_vehicles=2), 20, base_seed=23):
        reward, sol = random_rollout(inst, rng)
        assert abs(-reward - evaluate_solution(inst, sol.routes)) <= 1e-12


def test_solution_round_trip(tmp_path):
    inst = make_line_instance([0.5, 1.0], [3, 4], [10], [1.0])
    st = init_state(inst)
    st = step(st, Action(0, 1))
    st = step(st, Action(0, 2))
    _, sol = finalize_reward(st)
    p = tmp_path / "sol.json"
    write_solution(sol, p)
    assert read_solution(p) == sol
    rec = solution_to_dict(sol)
    rec["extra"] = True
    assert solution_from_dict(rec) == sol


def test_solution_bad_files(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("nope")
    with pytest.raises(FileFormatError):
        read_solution(p)
    p.write_text(json.dumps({"format_version": 42}))
    with pytest.raises(FileFormatError):
        read_solution(p)
