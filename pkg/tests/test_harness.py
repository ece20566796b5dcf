import json

import numpy as np
import pytest

from conftest import small_config
from sirad.harness import (
    Trainer,
    evaluate_checkpoint,
    format_table,
    grad_check,
    load_state,
    loop_ablation,
    metric_keys,
    new_state,
    relative_error,
    run_protocol,
    save_state,
    seed_streams,
)
from sirad.data import load_record
from sirad.persist import load_checkpoint


def test_metric_keys_structure():
    for L in (1, 3, 5):
        keys = metric_keys(L)
        assert len(keys) == 3 * L + 1
        assert keys[-1] == ("final_fused", "Final Fused Sum")
    assert [label for _, label in metric_keys(1)] == ["Loop 1 f3", "Loop 1 phi", "Loop 1 Fused", "Final Fused Sum"]


def test_format_table_average_column():
    text = format_table(["a", "b"], [("x", [0.5, 1.0])], "Metric")
    lines = text.splitlines()
    assert lines[0].split() == ["Metric", "a", "b", "Average"]
    assert lines[2].split() == ["x", "50.00", "100.00", "75.00"]


def test_seed_streams_are_independent_and_stable():
    a, b = seed_streams(3), seed_streams(3)
    assert list(a) == ["selection", "teacher", "student", "batches"]
    for k in a:
        assert a[k].generate_state(2).tolist() == b[k].generate_state(2).tolist()
    states = {tuple(s.generate_state(2)) for s in a.values()}
    assert len(states) == 4


def test_relative_error_floor():
    np.testing.assert_allclose(relative_error(np.array([1.0, 1e-9]), np.array([1.01, 2e-9])), [0.01 / 1.01, 1e-3])


def test_protocol_run_outputs(small_bench, tmp_path):
    cfg = small_config(small_bench, tmp_path / "out")
    (report,) = run_protocol(cfg)
    run_dir = tmp_path / "out" / "universal"
    for name in ("report.json", "table.txt", "timing.json", "model.ckpt"):
        assert (run_dir / name).exists()
    assert not (run_dir / "report.json.partial").exists()
    doc = json.loads((run_dir / "report.json").read_text())
    assert doc["domains"] == ["texture", "grid", "radial"]
    assert len(doc["train_set"]) == 3
    assert len(doc["fusion_table"]) == 3 * cfg.loops + 1
    assert doc["iterations"] == 12 and len(doc["loss_trajectory"]) == 5
    for row in doc["fusion_table"]:
        vals = list(row["values"].values())
        assert all(0.0 <= v <= 1.0 for v in vals)
        assert row["average"] == pytest.approx(np.mean(vals), abs=1e-15)
    assert doc["auroc"] == doc["fusion_table"][-1]["values"]
    echoed = json.loads((tmp_path / "out" / "config.json").read_text())
    assert echoed["train"]["iterations"] == 12
    assert "wall_clock_s" in json.loads((run_dir / "timing.json").read_text())
    # re-evaluating the checkpoint reproduces the report's numbers
    again = evaluate_checkpoint(run_dir / "model.ckpt", cfg)
    assert again.doc["fusion_table"] == doc["fusion_table"]


def test_specialized_protocol_trains_one_model_per_domain(small_bench, tmp_path):
    cfg = small_config(small_bench, tmp_path, protocol="one_shot_specialized", iterations=2)
    reports = run_protocol(cfg)
    assert [r.doc["run"] for r in reports] == ["texture", "grid", "radial"]
    assert all(len(r.doc["domains"]) == 1 and len(r.doc["train_set"]) == 1 for r in reports)


def test_reports_are_deterministic(small_bench, tmp_path):
    cfg = small_config(small_bench, tmp_path, iterations=4)
    run_protocol(cfg, tmp_path / "a")
    run_protocol(cfg, tmp_path / "b")
    for name in ("report.json", "table.txt", "model.ckpt"):
        assert (tmp_path / "a/universal" / name).read_bytes() == (tmp_path / "b/universal" / name).read_bytes()


def _pool(cfg, bench):
    from sirad.data import build_protocol, load_manifests

    ms = load_manifests(cfg.manifests)
    (run,) = build_protocol(ms, cfg.protocol_spec(0))
    return [load_record(p, d, "normal", cfg.image_size, cfg.channels).image for d, p in run.train]


def test_resume_reproduces_trajectory(small_bench, tmp_path):
    cfg = small_config(small_bench, tmp_path, iterations=10)
    pool = _pool(cfg, small_bench)
    full = new_state(cfg)
    Trainer(cfg, full, pool).run()

    part = new_state(cfg)
    Trainer(cfg, part, pool).run(until=4)
    save_state(tmp_path / "mid.ckpt", cfg, part)
    _, resumed = load_state(tmp_path / "mid.ckpt")
    assert resumed.iteration == 4
    Trainer(cfg, resumed, pool).run()
    assert resumed.losses == full.losses
    for (_, a), (_, b) in zip(full.model.named_parameters().items(), resumed.model.named_parameters().items()):
        assert a.data.tobytes() == b.data.tobytes()


def test_teacher_checkpoint_is_used(small_bench, tmp_path):
    cfg = small_config(small_bench, tmp_path, iterations=1)
    state = new_state(cfg.with_overrides(seed=99))
    save_state(tmp_path / "t.ckpt", cfg, state)
    other = new_state(cfg.with_overrides(teacher_checkpoint=str(tmp_path / "t.ckpt")))
    np.testing.assert_array_equal(
        other.model.teacher.params["stage2.weight"].data, state.model.teacher.params["stage2.weight"].data
    )
    default = new_state(cfg)
    np.testing.assert_array_equal(
        other.model.student.params["up.weight"].data, default.model.student.params["up.weight"].data
    )


def test_loop_ablation_table(small_bench, tmp_path):
    cfg = small_config(small_bench, tmp_path, iterations=2)
    table = loop_ablation(cfg, [1, 2])
    assert [r["loops"] for r in table.rows] == [1, 2]
    for r in table.rows:
        assert r["average"] == pytest.approx(np.mean([r["values"][d] for d in table.domains]), abs=1e-12)
    doc = json.loads((tmp_path / "ablation.json").read_text())
    assert doc["rows"] == table.rows
    assert (tmp_path / "ablation.txt").read_text().splitlines()[0].split()[0] == "L"
    # a single-L row matches that run's own summary
    solo = json.loads((tmp_path / "L1" / "universal" / "report.json").read_text())
    assert table.rows[0]["values"] == solo["auroc"]


def test_grad_check_single_loop_small():
    report = grad_check(loops=1, image_size=16, widths=(2, 2, 3, 3))
    assert report.passed()
    assert report.checked > 0
    assert set(report.teacher_grad_max.values()) == {0.0}


def test_checkpoint_meta_has_no_output_dir(small_bench, tmp_path):
    cfg = small_config(small_bench, tmp_path, iterations=1)
    save_state(tmp_path / "m.ckpt", cfg, new_state(cfg))
    meta = load_checkpoint(tmp_path / "m.ckpt").meta
    assert "output_dir" not in meta["config"]
    assert meta["seed"] == cfg.seed and meta["iteration"] == 0
