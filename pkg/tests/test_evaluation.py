import math

import numpy as np
import pandas as pd
import pytest

from tide import utils
from tide.datatypes import Quadruple, RunConfig
from tide.evaluation import (
    ABLATION_COLUMNS,
    CONSISTENCY_COLUMNS,
    DEPTH_COLUMNS,
    ablation_sweep,
    consistency_report,
    consistency_table,
    depth_metrics,
    depth_metrics_over,
    evaluate_prediction,
    miou,
    miou_over,
    report_csv,
    run_ablation,
    spearman,
    summarize_consistency,
    variant_configs,
)
from tide.scenes import default_grammar, generate_scene, rule_depth
from tide.train import train

utils.setup_logger(None)


@pytest.fixture(scope="module")
def grammar():
    return default_grammar()


def _brute_depth(pred, gt):
    n = pred.size
    abs_rel = sq_rel = sq = sq_log = l10 = 0.0
    logs, d1, d2, d3 = [], 0, 0, 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        abs_rel += abs(g - p) / g
        sq_rel += (g - p) ** 2 / g
        sq += (g - p) ** 2
        sq_log += (math.log(g) - math.log(p)) ** 2
        l10 += abs(math.log10(g) - math.log10(p))
        logs.append(math.log(p) - math.log(g))
        ratio = max(g / p, p / g)
        d1 += ratio < 1.25
        d2 += ratio < 1.25**2
        d3 += ratio < 1.25**3
    mean_log = sum(logs) / n
    var = sum((e - mean_log) ** 2 for e in logs) / n
    return {
        "si_log": 100 * math.sqrt(var),
        "a_rel": abs_rel / n,
        "log10": l10 / n,
        "rmse": math.sqrt(sq / n),
        "s_rel": sq_rel / n,
        "rmse_log": math.sqrt(sq_log / n),
        "delta1": d1 / n,
        "delta2": d2 / n,
        "delta3": d3 / n,
    }


def _brute_miou(pred, gt, k):
    ious = []
    for c in range(k):
        inter = union = 0
        for p, g in zip(pred.ravel(), gt.ravel()):
            inter += p == c and g == c
            union += p == c or g == c
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious)


class TestDepthMetrics:
    def test_identity(self):
        gt = np.array([[0.3, 0.5], [0.9, 2.0]])
        m = depth_metrics(gt, gt)
        for name in ("si_log", "a_rel", "log10", "rmse", "s_rel", "rmse_log"):
            assert getattr(m, name) == 0.0
        assert (m.delta1, m.delta2, m.delta3) == (1.0, 1.0, 1.0)

    def test_two_pixels(self):
        m = depth_metrics(np.array([2.0, 2.0]), np.array([1.0, 2.0]))
        assert m.a_rel == pytest.approx(0.5)
        assert m.rmse == pytest.approx(math.sqrt(0.5))
        assert m.delta1 == 0.5
        assert m.si_log == pytest.approx(34.657, abs=1e-3)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        gt = rng.uniform(0.1, 1.0, size=(6, 6))
        pred = rng.uniform(0.1, 1.0, size=(6, 6))
        assert depth_metrics(2 * gt, gt).si_log == pytest.approx(0.0, abs=1e-9)
        for k in (0.01, 0.5, 7.0):
            assert depth_metrics(k * pred, gt).si_log == pytest.approx(
                depth_metrics(pred, gt).si_log, abs=1e-9
            )

    def test_median_alignment(self):
        gt = np.array([0.2, 0.4, 0.8])
        m = depth_metrics(3 * gt, gt, median_align=True)
        assert m.a_rel == pytest.approx(0.0, abs=1e-12)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            gt = rng.uniform(0.05, 1.0, size=(5, 5))
            pred = rng.uniform(0.05, 1.0, size=(5, 5))
            m = depth_metrics(pred, gt)
            for name, value in _brute_depth(pred, gt).items():
                assert getattr(m, name) == pytest.approx(value, abs=1e-6), name
            assert m.delta1 <= m.delta2 <= m.delta3

    def test_valid_mask(self):
        gt = np.array([1.0, 2.0, 0.0])
        pred = np.array([2.0, 2.0, 5.0])
        m = depth_metrics(pred, gt, valid=gt > 0)
        assert m.a_rel == pytest.approx(0.5)

    def test_errors(self):
        with pytest.raises(ValueError):
            depth_metrics(np.ones(3), np.ones(4))
        with pytest.raises(ValueError):
            depth_metrics(np.ones(3), np.ones(3), valid=np.zeros(3, dtype=bool))
        with pytest.raises(ValueError):
            depth_metrics(np.array([1.0, 0.0]), np.ones(2))

    def test_per_image_and_pooled(self):
        preds = [np.array([2.0, 2.0]), np.array([1.0, 1.0, 1.0, 1.0])]
        gts = [np.array([1.0, 2.0]), np.array([1.0, 1.0, 1.0, 1.0])]
        assert depth_metrics_over(preds, gts).a_rel == pytest.approx(0.25)
        assert depth_metrics_over(preds, gts, pooled=True).a_rel == pytest.approx(1 / 6)
        with pytest.raises(ValueError):
            depth_metrics_over([], [])


class TestMiou:
    def test_identity_and_complement(self):
        gt = np.array([[0, 1], [1, 0]])
        assert miou(gt, gt, 2).mean == 1.0
        assert miou(1 - gt, gt, 2).mean == 0.0

    def test_crossed_halves(self):
        pred = np.array([[0, 1], [0, 1]])
        gt = np.array([[0, 0], [1, 1]])
        score = miou(pred, gt, 2)
        assert score.iou.tolist() == pytest.approx([1 / 3, 1 / 3])
        assert score.mean == pytest.approx(1 / 3)

    def test_absent_categories_excluded(self):
        gt = np.array([[0, 1], [1, 0]])
        score = miou(gt, gt, 5)
        assert np.isnan(score.iou[2:]).all()
        assert score.mean == 1.0

    def test_symmetry_relabel_and_oracle(self):
        rng = np.random.default_rng(2)
        perm = np.array([3, 0, 2, 1])
        for _ in range(1000):
            pred = rng.integers(0, 4, size=(5, 5))
            gt = rng.integers(0, 4, size=(5, 5))
            m = miou(pred, gt, 4).mean
            assert m == pytest.approx(miou(gt, pred, 4).mean)
            assert m == pytest.approx(miou(perm[pred], perm[gt], 4).mean)
            assert m == pytest.approx(_brute_miou(pred, gt, 4), abs=1e-6)

    def test_errors(self):
        with pytest.raises(ValueError):
            miou(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int), 2)
        with pytest.raises(ValueError):
            miou(np.array([0, 2]), np.array([0, 1]), 2)
        with pytest.raises(ValueError):
            miou(np.array([], dtype=int), np.array([], dtype=int), 2)

    def test_over_images(self):
        preds = [np.array([0, 1]), np.array([0, 0])]
        gts = [np.array([0, 1]), np.array([1, 1])]
        assert miou_over(preds, gts, 2) == pytest.approx(0.5)
        assert miou_over(preds, gts, 2, pooled=True) == pytest.approx(1 / 3)


class TestEvaluatePrediction:
    def test_perfect_prediction(self, grammar):
        records = [generate_scene(s, grammar) for s in range(3)]
        df = evaluate_prediction(records, records, grammar.num_categories)
        assert list(df.columns) == ["n", *DEPTH_COLUMNS, "miou"]
        row = df.iloc[0]
        assert row["n"] == 3 and row["miou"] == 1.0
        assert row["rmse"] == 0.0 and row["delta1"] == 1.0

    def test_zero_depth_records_are_skipped(self, grammar):
        records = [generate_scene(s, grammar) for s in range(2)]
        blank = Quadruple(records[1].image, np.zeros_like(records[1].depth), records[1].mask, "")
        df = evaluate_prediction([records[0], blank], records, grammar.num_categories)
        assert df.iloc[0]["rmse"] == 0.0
        with pytest.raises(ValueError):
            evaluate_prediction([blank], records[1:], grammar.num_categories)

    def test_csv_header(self, grammar):
        records = [generate_scene(0, grammar)]
        text = report_csv(evaluate_prediction(records, records, grammar.num_categories))
        assert text.splitlines()[0] == ",".join(["n", *DEPTH_COLUMNS, "miou"])
        assert "\r" not in text


class TestConsistency:
    def test_spearman(self):
        a = np.arange(9.0)
        assert spearman(a, a**3) == pytest.approx(1.0)
        assert spearman(a, -a) == pytest.approx(-1.0)
        assert spearman(a, np.ones(9)) is None

    def test_generated_scenes_agree(self, grammar):
        for seed in range(10):
            q = generate_scene(seed, grammar)
            exact = Quadruple(q.image, rule_depth(q.mask, grammar).astype(np.float32), q.mask, q.caption)
            report = consistency_report(exact, grammar)
            assert report.mask_image_miou == 1.0
            assert report.depth_mask_spearman == pytest.approx(1.0)

    def test_one_swapped_pixel(self, grammar):
        background = grammar.backgrounds["sandy"][0]
        fish, reef = grammar.colors["fish"], grammar.colors["reef"]
        mask = np.array([[0, 1, 2]] * 3, dtype=np.uint8)
        image = np.array([[background, fish, reef]] * 3, dtype=np.float32)
        image[0, 2] = fish
        q = Quadruple(image, rule_depth(mask, grammar).astype(np.float32), mask, "a fish and a reef")
        report = consistency_report(q, grammar)
        # background 3/3, fish 3/4, reef 2/3
        assert report.mask_image_miou == pytest.approx((1 + 3 / 4 + 2 / 3) / 3)
        assert not report.depth_undefined

    def test_single_category_is_undefined(self, grammar):
        q = generate_scene(0, grammar)
        flat = Quadruple(q.image, q.depth, np.zeros_like(q.mask), q.caption)
        report = consistency_report(flat, grammar)
        assert report.depth_undefined

    def test_table_and_summary(self, grammar):
        records = [generate_scene(s, grammar) for s in range(3)]
        q = records[0]
        records.append(Quadruple(q.image, q.depth, np.zeros_like(q.mask), q.caption))
        df = consistency_table(records, grammar)
        assert list(df.columns) == CONSISTENCY_COLUMNS
        assert df["id"].tolist() == ["000000", "000001", "000002", "000003"]
        summary = summarize_consistency(df)
        assert summary["depth_undefined"] == 1
        assert 0.0 < summary["mask_image_miou"] <= 1.0


TINY_MODEL = dict(
    size=8,
    patch=4,
    width=8,
    image_layers=2,
    mini_layers=2,
    share_end=1,
    share_stride=1,
    lora_rank_image=2,
    lora_rank_depth=2,
    lora_rank_mask=2,
)


def _tiny_config(stage: str) -> RunConfig:
    return RunConfig.from_dict(
        {
            "schedule": {"T": 10},
            "model": TINY_MODEL,
            "train": {"stage": stage, "iterations": 1, "mini_iterations": 1, "batch_size": 1},
            "sample": {"steps": 2},
        }
    )


class TestAblation:
    @pytest.fixture(scope="class")
    def checkpoint(self, tmp_path_factory):
        grammar = default_grammar(8)
        records = [generate_scene(s, grammar) for s in range(2)]
        out = tmp_path_factory.mktemp("ablation")
        stage_a = train(_tiny_config("A"), records, grammar, out / "a")
        return train(_tiny_config("B"), records, grammar, out / "b", init=stage_a)

    def test_identical_checkpoints_give_identical_rows(self, checkpoint):
        slots = {v: checkpoint for v in ("both", "neither", "tan_only", "ils_only")}
        df = ablation_sweep(slots, ["a fish over a sandy seabed"], n_samples=2, steps=2)
        assert list(df.columns) == ABLATION_COLUMNS
        assert df["variant"].tolist() == ["ils_only", "tan_only", "both", "neither"]
        rows = df.drop(columns="variant")
        for i in range(1, 4):
            pd.testing.assert_series_equal(rows.iloc[0], rows.iloc[i], check_names=False)
        assert rows.iloc[0]["share"] == "0:1:1"

    def test_missing_variant(self, checkpoint):
        with pytest.raises(ValueError):
            ablation_sweep({"both": checkpoint, "neither": checkpoint}, ["a fish"], 1, 2)
        with pytest.raises(ValueError):
            ablation_sweep({"x": checkpoint}, ["a fish"], 0, 2)

    def test_free_labels_keep_order(self, checkpoint):
        df = ablation_sweep({"late": checkpoint, "early": checkpoint}, ["a reef"], 1, 2)
        assert df["variant"].tolist() == ["late", "early"]

    def test_time_gate_axis(self, tmp_path):
        grammar = default_grammar(8)
        records = [generate_scene(s, grammar) for s in range(2)]
        config = _tiny_config("B")
        df = run_ablation(config, records, grammar, tmp_path, kind="time_gate", budget=1, n_samples=1)
        assert df["variant"].tolist() == ["time_adaptive", "constant_gate"]
        assert df["time_adaptive"].tolist() == [True, False]
        assert df["seed"].tolist() == [0, 0]
        assert (tmp_path / "seed-0" / "constant_gate" / "step-000001").is_dir()

    def test_variant_configs(self):
        config = RunConfig()
        toggles = variant_configs(config, "toggles")
        assert {n: (c.train.ils, c.train.tan) for n, c in toggles.items()} == {
            "ils_only": (True, False),
            "tan_only": (False, True),
            "both": (True, True),
            "neither": (False, False),
        }
        positions = variant_configs(config, "positions")
        shares = {
            n: (c.model.share_start, c.model.share_end, c.model.share_stride)
            for n, c in positions.items()
        }
        assert shares == {"first_half": (0, 3, 1), "second_half": (4, 7, 1), "whole": (0, 7, 2)}
        gates = variant_configs(config, "time_gate")
        assert {n: c.model.tan_time_adaptive for n, c in gates.items()} == {
            "time_adaptive": True,
            "constant_gate": False,
        }
        assert all(c.train.ils and c.train.tan for c in gates.values())
        with pytest.raises(ValueError):
            variant_configs(config, "widths")


@pytest.mark.slow
class TestDeskScale:
    @pytest.fixture(scope="class")
    def ablation(self, tmp_path_factory):
        grammar = default_grammar()
        records = [generate_scene(s, grammar) for s in range(256)]
        config = RunConfig.load()
        return run_ablation(
            config,
            records,
            grammar,
            tmp_path_factory.mktemp("desk"),
            kind="toggles",
            budget=config.train.iterations,
            seeds=(0, 1, 2),
            n_samples=32,
            workers=utils.max_workers,
        )

    def test_sampled_triples_agree(self, ablation):
        both = ablation[ablation["variant"] == "both"]
        assert len(both) == 3
        assert both["mask_image_miou"].mean() >= 0.6
        assert both["depth_mask_spearman"].mean() >= 0.5

    def test_sharing_and_modulation_help(self, ablation):
        agreement = ablation.groupby("variant")["mask_image_miou"].mean()
        assert agreement["both"] >= agreement["ils_only"] - 0.02
        assert agreement["ils_only"] >= agreement["neither"] - 0.02


if __name__ == "__main__":
    TestDepthMetrics().test_brute_force_oracle()
