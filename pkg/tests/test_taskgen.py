import numpy as np
import pytest
from hypothesis import given, strategies as st

from auxlatent.taskgen import (KINDS, MAX_PLAN_LEN, PLAN_POINTS, PLAN_WORDS, Geometry, TaskInstance,
                               generate_task, load_dataset, make_dataset, render_diagram, save_dataset,
                               solve_oracle, split_dataset)
from auxlatent.vocab import Vocabulary


def test_oracle_agrees_on_ten_thousand_tasks():
    tasks = make_dataset(10_000, seed=5)
    assert sum(solve_oracle(t) != t.answer for t in tasks) == 0


@given(st.sampled_from(KINDS), st.integers(0, 10**6), st.booleans())
def test_generation_properties(kind, seed, mc):
    t = generate_task(kind, seed, multiple_choice=mc)
    q = np.array(t.question_raster)
    a = np.array(t.aux_raster)
    assert q.shape == (16, 16) and set(np.unique(q)) <= {0, 1}
    assert np.all(a >= q) and (a != q).any()
    assert len(t.plan) <= MAX_PLAN_LEN
    assert all(tok in PLAN_WORDS or tok in PLAN_POINTS for tok in t.plan)
    assert solve_oracle(t) == t.answer
    Vocabulary().encode(t.question)
    assert (t.question_type == "multiple-choice") == mc


def test_generation_is_deterministic():
    a = generate_task("reflect-shortest-path", 17)
    b = generate_task("reflect-shortest-path", 17)
    assert a.to_json() == b.to_json()
    assert solve_oracle(a) == solve_oracle(a)


def test_aux_raster_differs_exactly_on_aux_stroke():
    t = generate_task("connect-midline-area", 3)
    plain = render_diagram(t.geometry, with_aux=False)
    aux_only = render_diagram(Geometry(segments=t.geometry.aux_segments), with_aux=False)
    diff = (render_diagram(t.geometry, with_aux=True) != plain)
    assert np.all(aux_only[diff] == 1)
    assert np.all(diff == (aux_only.astype(bool) & ~plain.astype(bool)))


def test_empty_geometry_renders_blank():
    assert not render_diagram(Geometry()).any()


def test_out_of_canvas_rejected():
    with pytest.raises(ValueError, match="outside"):
        render_diagram(Geometry(segments=[((0, 0), (16, 3))]))


def test_oracle_ignores_stored_answer():
    t = generate_task("unfold-surface-distance", 2, multiple_choice=False)
    forged = TaskInstance.from_json({**t.to_json(), "answer": "999"})
    assert solve_oracle(forged) == t.answer


def test_malformed_task_rejected():
    t = generate_task("parallel-angle-transfer", 1, multiple_choice=False)
    bad = TaskInstance.from_json({**t.to_json(), "params": {}})
    with pytest.raises(ValueError, match="malformed"):
        solve_oracle(bad)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        generate_task("trisect", 0)


def test_split_is_stratified_and_deterministic():
    tasks = make_dataset(500, seed=0)
    train, held = split_dataset(tasks, (0.8, 0.2), seed=4)
    assert (len(train), len(held)) == (400, 100)
    for k in KINDS:
        n_k = sum(t.kind == k for t in tasks)
        assert abs(sum(t.kind == k for t in held) - 0.2 * n_k) <= 1
    assert not {t.id for t in train} & {t.id for t in held}
    again = split_dataset(tasks, (0.8, 0.2), seed=4)
    assert [t.id for t in again[1]] == [t.id for t in held]


def test_split_edge_fractions():
    tasks = make_dataset(20)
    every, none = split_dataset(tasks, (1.0, 0.0))
    assert len(every) == 20 and none == []
    with pytest.raises(ValueError):
        split_dataset(tasks[:2], (0.5, 0.5))
    with pytest.raises(ValueError):
        split_dataset(tasks, (0.5, 0.4))


def test_dataset_jsonl_round_trip(tmp_path):
    tasks = make_dataset(12, seed=2)
    path = tmp_path / "d.jsonl"
    save_dataset(tasks, path)
    back = load_dataset(path)
    assert [t.to_json() for t in back] == [t.to_json() for t in tasks]


def test_malformed_dataset_line_reported(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(make_dataset(2), path)
    with open(path, "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(ValueError, match=":3:"):
        load_dataset(path)
