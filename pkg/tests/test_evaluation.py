import numpy as np
import pytest

from pcn.errors import ConfigError
from pcn.evaluation import (
    REPORT_COLUMNS,
    dump_heatmaps,
    evaluate_gfss,
    format_table,
    read_report_csv,
    sample_task,
    write_per_class_csv,
    write_report_csv,
)
from pcn.episodes import MetaTrainConfig, init_calibrator


def test_task_structure(small_ds):
    task = sample_task(small_ds, 4, shots=1, seed=0)
    assert task.seed == (0, 10, 4)
    assert len(task.support) == len(small_ds.novel_ids)
    assert len(task.pairs) == len(small_ds.base_ids)
    val = set(small_ds.val_idx)
    for k, n in enumerate(small_ds.novel_ids):
        for i in task.support[k : k + 1]:
            assert i in val and set(np.unique(small_ds.masks[i]).tolist()) <= {0, n}
    for (ni, bi), b in zip(task.pairs, small_ds.base_ids):
        assert ni in val and bi in val
        assert set(np.unique(small_ds.masks[ni]).tolist()) & set(small_ds.novel_ids)
        assert np.any(small_ds.masks[bi] == b)
        assert ni not in task.support and bi not in task.support
    again = sample_task(small_ds, 4, shots=1, seed=0)
    assert again.pairs == task.pairs and again.support == task.support


def test_too_few_support_candidates(small_ds):
    from pcn.errors import SamplingError

    with pytest.raises(SamplingError):
        sample_task(small_ds, 0, shots=50, seed=0)


def test_oracle_perfect_and_background_zero(small_ds, random_bundle):
    reps = evaluate_gfss(random_bundle, small_ds, ["oracle", "background"], num_tasks=4)
    o, b = reps["oracle"], reps["background"]
    for v in (o.miou_base, o.miou_novel, o.miou_all, o.h_mean):
        assert v == 1.0
    assert b.miou_base == 0.0 and b.miou_novel == 0.0 and b.h_mean == 0.0
    assert o.task_seeds == b.task_seeds
    assert o.n_base == 6 and o.n_novel == 2


def test_background_counted_when_requested(small_ds, random_bundle):
    rep = evaluate_gfss(random_bundle, small_ds, ["background"], num_tasks=3, include_background=True)["background"]
    assert 0 < rep.per_class_iou[0] < 1
    assert rep.n_base == 7
    assert rep.miou_base == pytest.approx(rep.per_class_iou[0] / 7)


def test_global_and_per_task_accumulation_agree_for_oracle(small_ds, random_bundle):
    a = evaluate_gfss(random_bundle, small_ds, ["oracle"], num_tasks=2, global_accumulate=True)["oracle"]
    assert a.h_mean == 1.0


def test_modes_share_tasks_and_threads_do_not_change_results(small_ds, random_bundle):
    kw = dict(num_tasks=3, inner_iters=3)
    one = evaluate_gfss(random_bundle, small_ds, ["nsf", "plain", "npf"], threads=1, **kw)
    two = evaluate_gfss(random_bundle, small_ds, ["nsf", "plain", "npf"], threads=2, **kw)
    for m in one:
        assert one[m].per_class_iou == two[m].per_class_iou
        assert 0.0 <= one[m].h_mean <= 1.0
    assert one["nsf"].task_seeds == one["plain"].task_seeds


def test_zero_calibrator_equals_nsf(small_ds, random_bundle):
    random_bundle.calibrators["pcn"] = init_calibrator("pcn", 256, 6, 2, MetaTrainConfig(d=4), 0)
    reps = evaluate_gfss(random_bundle, small_ds, ["nsf", "pcn"], num_tasks=2, inner_iters=3)
    assert reps["nsf"].per_class_iou == reps["pcn"].per_class_iou


def test_bad_modes(small_ds, random_bundle):
    with pytest.raises(ConfigError):
        evaluate_gfss(random_bundle, small_ds, ["bogus"], num_tasks=1)
    with pytest.raises(ConfigError):
        evaluate_gfss(random_bundle, small_ds, ["selfattn"], num_tasks=1)
    with pytest.raises(ConfigError):
        evaluate_gfss(random_bundle, small_ds, ["oracle"], num_tasks=0)


def test_report_files(tmp_path, small_ds, random_bundle):
    reps = list(evaluate_gfss(random_bundle, small_ds, ["oracle", "background"], num_tasks=2).values())
    write_report_csv(tmp_path / "r.csv", reps, split=0, seed=0, config_hash="abc")
    rows = read_report_csv(tmp_path / "r.csv")
    assert list(rows[0]) == REPORT_COLUMNS
    assert rows[0]["mode"] == "oracle" and float(rows[0]["h_mean"]) == 1.0 and rows[1]["config_hash"] == "abc"
    write_per_class_csv(tmp_path / "p.csv", reps)
    assert (tmp_path / "p.csv").read_text().startswith("mode,class_id,iou")
    table = format_table(reps)
    assert "100.00" in table.splitlines()[2] and table.splitlines()[0].split()[-1] == "H_mean"


def test_heatmap_dump(tmp_path, small_ds, random_bundle):
    files = dump_heatmaps(random_bundle, small_ds, tmp_path, count=1, shots=1, seed=0, mode="nsf", inner_iters=2)
    assert sum(p.suffix == ".pgm" for p in files) == 9
    assert any(p.name.endswith("_scores.csv") for p in files)
