import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dreamkit.errors import ValidationError
from dreamkit.fingerprint import Fingerprint, FingerprintSet
from dreamkit.harness import (ExperimentPlan, ResultRow, ResultTable, Workspace, audit_sources, class_loss_drop,
                              domain_probe, export_embeddings, normalized_accuracy, per_attribute_accuracy,
                              prepare_trial, random_accuracy, random_row, read_embeddings, rotation_plans,
                              run_domain_shift, run_lodo, sweep, trial_seeds)
from dreamkit.zoo import ATTRIBUTE_NAMES, HEAD_SIZES, REPORT_LABELS

from conftest import synthetic_fingerprints, tiny_config

# ---------------------------------------------------------------------------
# metrics


def test_random_row_is_analytic():
    np.testing.assert_allclose(random_row(), [25, 50, 50, 50, 50, 100 / 3, 100 / 3, 100 / 3, 100 / 3])
    assert random_row().mean() == pytest.approx(39.81, abs=0.005)
    assert random_accuracy("kernel_size") == 50.0


def test_per_attribute_accuracy_counts_matches():
    labels = np.array([[0] * 9, [1] * 9, [2, 1, 1, 1, 1, 2, 2, 2, 2], [3, 0, 0, 0, 0, 0, 0, 0, 0]])
    pred = labels.copy()
    pred[0, 0] = 1
    pred[1:3, 8] = 0
    accs, avg = per_attribute_accuracy(pred, labels)
    assert accs[0] == 75.0 and accs[8] == 50.0 and accs[1:8].tolist() == [100.0] * 7
    assert avg == pytest.approx(np.mean(accs))
    with pytest.raises(ValidationError):
        per_attribute_accuracy(pred[:2], labels)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_per_attribute_accuracy_equals_loop_recount(n, seed):
    rng = np.random.default_rng(seed)
    labels = np.stack([rng.integers(k, size=n) for k in HEAD_SIZES], 1)
    pred = np.stack([rng.integers(k, size=n) for k in HEAD_SIZES], 1)
    accs, _ = per_attribute_accuracy(pred, labels)
    for j in range(9):
        hits = sum(1 for i in range(n) if pred[i, j] == labels[i, j])
        assert accs[j] == pytest.approx(100.0 * hits / n)
    assert per_attribute_accuracy(labels, labels)[1] == 100.0


def test_normalized_accuracy():
    assert normalized_accuracy(62.5, "dropout") == pytest.approx(0.25)
    assert normalized_accuracy(25.0, "activation") == 0.0
    assert normalized_accuracy(100.0, "optimizer") == 1.0


# ---------------------------------------------------------------------------
# tables


def _table():
    t = ResultTable(title="demo")
    for trial, seed in enumerate((3, 4)):
        t.add(ResultRow("random", "d0", trial, seed, tuple(random_row())))
        t.add(ResultRow("dream", "d0", trial, seed, tuple(50.0 + trial + i for i in range(9)), "lambda=0.1"))
    return t


def test_table_csv_round_trip():
    t = _table()
    text = t.to_csv()
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0][4:13] == list(REPORT_LABELS)
    back = ResultTable.from_csv(text)
    for a, b in zip(t.rows, back.rows):
        assert (a.method, a.target, a.trial, a.seed, a.note) == (b.method, b.target, b.trial, b.seed, b.note)
        np.testing.assert_allclose(a.accs, b.accs, atol=1e-6)


def test_table_rejects_tampered_average():
    lines = _table().to_csv().splitlines()
    parts = lines[2].split(",")
    parts[-2] = "99.000000"
    lines[2] = ",".join(parts)
    with pytest.raises(ValidationError, match="average"):
        ResultTable.from_csv("\n".join(lines))


def test_table_aggregate_and_text():
    t = _table()
    mean, std, avg, avg_std = t.aggregate("dream")
    assert mean[0] == 50.5 and std[0] == 0.5
    assert avg == pytest.approx(54.5) and avg_std == pytest.approx(0.5)
    text = t.to_text()
    assert text.splitlines()[0] == "demo"
    assert "39.81" in text and "54.50" in text
    with pytest.raises(ValidationError):
        t.aggregate("kennen")


def test_result_row_range_check():
    with pytest.raises(ValidationError):
        ResultRow("x", "d", 0, 0, (101.0,) + (0.0,) * 8)
    with pytest.raises(ValidationError):
        ResultRow("x", "d", 0, 0, (1.0,) * 8)


# ---------------------------------------------------------------------------
# plans and leakage


def test_plan_validation():
    ExperimentPlan("c", ("a", "b"))
    with pytest.raises(ValidationError, match="also a source"):
        ExperimentPlan("a", ("a", "b"))
    with pytest.raises(ValidationError, match="trial"):
        ExperimentPlan("c", ("a", "b"), seeds=())
    with pytest.raises(ValidationError, match="mode"):
        ExperimentPlan("c", ("a", "b"), mode="chaos")
    with pytest.raises(ValidationError, match="methods"):
        ExperimentPlan("c", ("a", "b"), methods=("magic",))
    with pytest.raises(ValidationError, match="class list"):
        ExperimentPlan("c", ("a", "b"), mode="class_subset")
    with pytest.raises(ValidationError, match="empty"):
        ExperimentPlan("c", ("a", "b"), mode="class_subset", classes=())


def test_rotation_plans_and_seeds():
    cfg = tiny_config()
    assert trial_seeds(cfg) == (11, 12)
    plans = rotation_plans(cfg, ["a", "b", "c"])
    assert [(p.target, p.sources) for p in plans] == [("a", ("b", "c")), ("b", ("a", "c")), ("c", ("a", "b"))]
    with pytest.raises(ValidationError):
        trial_seeds(cfg, 0)


def test_canary_row_trips_the_leakage_audit():
    fps = synthetic_fingerprints(per_domain=3, domains=("a", "b"))
    audit_sources(fps, "c", "training")
    canary = Fingerprint("canary", "c", fps.rows[0].vector, 3, 4, fps.rows[0].attrs)
    leaked = FingerprintSet(fps.rows + [canary], 2, 3, 4)
    with pytest.raises(ValidationError, match="canary"):
        audit_sources(leaked, "c", "training")


# ---------------------------------------------------------------------------
# probes


def test_probe_at_chance_on_identical_distributions():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(900, 5))
    doms = np.repeat(["a", "b", "c"], 300)
    rng.shuffle(doms)
    assert abs(domain_probe(x, doms, seed=0) - 1 / 3) < 0.06


def test_probe_separates_shifted_domains():
    fps = synthetic_fingerprints(per_domain=40, domain_shift=3.0)
    assert domain_probe(fps.matrix(), fps.domains()) > 0.9
    with pytest.raises(ValidationError):
        domain_probe(np.zeros((4, 2)), ["a"] * 4)


def test_class_loss_drop():
    class H:
        def __init__(self, v):
            self.cls_loss = v
    first, tail = class_loss_drop([H(v) for v in (10.0, 5, 4, 3, 2, 1, 1, 1, 1, 3.0)], tail=0.2)
    assert (first, tail) == (10.0, 2.0)


# ---------------------------------------------------------------------------
# end to end on a tiny workspace


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    return Workspace(tiny_config(), tmp_path_factory.mktemp("ws"))


def test_workspace_trains_and_caches(ws):
    zoo = ws.zoo()
    assert len(zoo.records) == 42 and all(r.status in ("ok", "nonfinite") for r in zoo.records)
    assert (ws.zoo_dir() / "manifest.txt").exists()
    plan = ExperimentPlan("d1", ("d0", "d2"))
    a = prepare_trial(ws, plan, 11)
    b = prepare_trial(Workspace(ws.cfg, ws.root), plan, 11)
    assert a.train.matrix().tobytes() == b.train.matrix().tobytes()
    assert set(a.train.domains()) <= {"d0", "d2"} and set(a.test.domains()) == {"d1"}
    assert a.train.n_queries == 4 and a.train.n_classes == 3


def test_lodo_run_and_oracle(ws, tmp_path):
    plans = rotation_plans(ws.cfg, ws.domains, methods=("random", "oracle", "kennen", "dream"), seeds=(11,),
                           tune_lambda=False)
    table = run_lodo(ws, plans, pred_dir=tmp_path)
    assert len(table.rows) == 12
    for r in table.select("oracle"):
        assert r.accs == (100.0,) * 9
    for r in table.select("random"):
        np.testing.assert_allclose(r.accs, random_row())
    # recount one prediction file and compare with its table row
    path = tmp_path / "dream-d1-t0.csv"
    rows = list(csv.reader(path.open()))
    body = np.array([[int(v) for v in row[1:]] for row in rows[1:]])
    recount = 100.0 * (body[:, :9] == body[:, 9:]).mean(0)
    np.testing.assert_allclose(table.select("dream", "d1")[0].accs, recount)


def test_lodo_is_deterministic(ws):
    plan = rotation_plans(ws.cfg, ws.domains, methods=("svm", "mmd"), seeds=(12,))[0]
    a = run_lodo(ws, plan).to_csv()
    b = run_lodo(Workspace(ws.cfg, ws.root), plan).to_csv()
    assert a == b


def test_domain_shift_modes(ws):
    t = run_domain_shift(ws, "class_subset", classes=[0, 1], methods=("oracle", "kennen"), seeds=(11,))
    assert {r.method for r in t.rows} == {"oracle*", "kennen*"}
    t = run_domain_shift(ws, "disjoint", methods=("kennen",), seeds=(11,))
    assert {r.method for r in t.rows} == {"kennen**"}
    with pytest.raises(ValidationError, match="empty"):
        run_domain_shift(ws, "class_subset", classes=[])


def test_class_subset_fingerprints_have_subset_width(ws):
    plan = ExperimentPlan("d0", ("d1", "d2"), mode="class_subset", classes=(0, 2))
    data = prepare_trial(ws, plan, 11)
    assert data.train.n_classes == data.test.n_classes == 2
    np.testing.assert_allclose(data.test.matrix().reshape(len(data.test), 4, 2).sum(2), 1.0)


def test_query_count_sweep_changes_fingerprint_length(ws):
    tables, text = sweep(ws, "query_count", [2, 4], methods=("kennen",), seeds=(11,), targets=["d0"])
    assert set(tables) == {2, 4}
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0][:3] == ["axis", "value", "method"] and len(rows) == 3
    from dreamkit.fingerprint import read_fingerprints
    lengths = {read_fingerprints(p).n_queries for p in ws.zoo_dir().glob("fingerprints/*.fp")}
    assert {2, 4} <= lengths


def test_sweep_validation(ws):
    with pytest.raises(ValidationError, match="axis"):
        sweep(ws, "depth", [1])
    with pytest.raises(ValidationError, match="multiple"):
        sweep(ws, "query_count", [3])
    with pytest.raises(ValidationError, match="non-negative"):
        sweep(ws, "lambda", [-1.0])
    with pytest.raises(ValidationError):
        sweep(ws, "lambda", [])


def test_export_embeddings_is_deterministic(ws, tmp_path):
    captured = {}

    def keep(plan, trial, fit, data):
        captured[fit.method] = (fit.model, data)

    run_lodo(ws, ExperimentPlan("d2", ("d0", "d1"), methods=("dream",), seeds=(11,), tune_lambda=False),
             on_fit=keep)
    pipe, data = captured["dream"]
    fps = FingerprintSet(data.train.rows + data.test.rows, 3, 3, 4)
    export_embeddings(pipe, fps, tmp_path / "a.csv")
    export_embeddings(pipe, fps, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    ids, doms, z = read_embeddings(tmp_path / "a.csv")
    assert z.shape == (len(fps), 6) and ids[0] == fps.rows[0].model_id
    raw, emb = __import__("dreamkit.harness", fromlist=["x"]).invariance_probe(pipe, fps)
    assert 0 <= emb <= 1 and 0 <= raw <= 1
