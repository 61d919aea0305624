"""Protocol runners: bookkeeping, schemas, determinism and parallel parity.
Trend assertions live in the acceptance suite; these tests use tiny corpora
and short training budgets."""

import filecmp

import pytest

from camtrap import experiments as ex
from camtrap import synth

SMALL_SPECS = (
    synth.SpeciesSpec("tiger", "stripes", 2, 8),
    synth.SpeciesSpec("leopard", "spots", 2, 8),
)
SMALL_SYNTH = synth.SynthConfig(image_size=64, species_specs=SMALL_SPECS, n_negatives=16, seed=11)
FAST = dict(synth_config=SMALL_SYNTH, n_seeds=2, head_epochs=40, head_lr=4.0, svm_epochs=8)


def config(protocol, **overrides):
    kwargs = dict(FAST)
    kwargs.update(overrides)
    return ex.ExperimentConfig(protocol=protocol, **kwargs)


@pytest.fixture(scope="module")
def ctx():
    return ex.PipelineContext(config("volume"))


class TestConfig:
    def test_unknown_protocol(self):
        with pytest.raises(ValueError):
            config("nope")

    def test_needs_corpus_source(self):
        with pytest.raises(ValueError):
            ex.ExperimentConfig(protocol="volume")

    def test_fraction_bounds(self):
        with pytest.raises(ValueError):
            config("volume", fractions=(0.5, 1.2))

    def test_needs_a_seed(self):
        with pytest.raises(ValueError):
            config("volume", n_seeds=0)

    def test_resolved_excludes_jobs(self):
        assert "jobs" not in config("volume", jobs=4).resolved()


class TestDetectorSweeps:
    def test_volume_row_count(self, ctx):
        cfg = config("volume", fractions=(0.5, 1.0))
        report = ex.run_volume_sweep(cfg, ctx)
        assert len(report.rows) == 2 * cfg.n_seeds
        assert len(report.aggregates) == 2
        assert {r["fraction"] for r in report.rows} == {0.5, 1.0}

    def test_degenerate_single_point_sweep(self, ctx):
        cfg = config("volume", fractions=(1.0,), n_seeds=1)
        report = ex.run_volume_sweep(cfg, ctx)
        assert len(report.rows) == 1
        row = report.rows[0]
        assert row["n_images"] == len(ctx.manifest)
        assert row["accuracy"] is not None

    def test_proportion_rows(self, ctx):
        cfg = config("proportion", train_proportions=(0.5, 1.0))
        report = ex.run_proportion_sweep(cfg, ctx)
        assert len(report.rows) == 2 * cfg.n_seeds
        assert all("n_train" in r for r in report.rows)

    def test_split_marks_best_ratio(self, ctx):
        cfg = config("split", split_ratios=(0.5, 0.7))
        report = ex.run_split_sweep(cfg, ctx)
        assert sum(a["best"] for a in report.aggregates) == 1
        rerun = ex.run_split_sweep(cfg, ctx)
        assert report.aggregates == rerun.aggregates

    def test_jobs_parity(self, ctx):
        a = ex.run_volume_sweep(config("volume", fractions=(0.5, 1.0), jobs=1), ctx)
        b = ex.run_volume_sweep(config("volume", fractions=(0.5, 1.0), jobs=4), ctx)
        assert a.rows == b.rows
        assert a.aggregates == b.aggregates


class TestIllumination:
    def test_schema_rows(self, ctx):
        report = ex.run_illumination_study(config("illumination"), ctx)
        assert [a["subset"] for a in report.aggregates] == ["daylight", "night", "mixed"]
        for key in ("training_accuracy_mean", "test_accuracy_mean", "skipped"):
            assert all(key in a for a in report.aggregates)

    def test_night_skipped_when_absent(self, ctx):
        # the shared corpus has night_fraction 0
        report = ex.run_illumination_study(config("illumination"), ctx)
        by_subset = {a["subset"]: a for a in report.aggregates}
        assert by_subset["night"]["skipped"] == 1
        assert by_subset["daylight"]["skipped"] == 0
        assert by_subset["night"]["test_accuracy_mean"] is None


@pytest.fixture(scope="module")
def report(ctx):
    return ex.run_species_comparison(config("species", n_seeds=1, head_epochs=60), ctx)


class TestSpecies:
    def test_four_variant_columns(self, report):
        for row in report.rows:
            for key in ("detector_gated", "direct", "wsddn_top1", "wsddn_top5"):
                assert key in row

    def test_top5_at_least_top1(self, report):
        for row in report.rows:
            if row["wsddn_top1"] is not None:
                assert row["wsddn_top5"] >= row["wsddn_top1"]

    def test_direct_confusion_emitted(self, report, tmp_path):
        assert "direct" in report.confusions
        files = ex.write_report(report, tmp_path)
        assert "species_confusion_direct.csv" in files
        text = (tmp_path / "species_confusion_direct.csv").read_text()
        assert "TP+FP" in text and "TP+FN" in text


class TestIndividual:
    def test_schema_and_balance(self, ctx):
        report = ex.run_individual_study(config("individual", n_seeds=1, head_epochs=40), ctx)
        assert {r["species"] for r in report.rows} == {"tiger", "leopard", "joint"}
        balanced = [r for r in report.rows if r["balanced"] == 1]
        assert balanced
        for species in ("tiger", "leopard", "joint"):
            counts = {r["train_images"] for r in balanced if r["species"] == species}
            assert len(counts) == 1  # every individual trained on the same count

    def test_segmented_variant_same_schema(self, ctx):
        cfg = config("individual", n_seeds=1, head_epochs=30, segment=True)
        report = ex.run_individual_study(cfg, ctx)
        seg_rows = [r for r in report.rows if r["segmented"] == 1]
        raw_rows = [r for r in report.rows if r["segmented"] == 0]
        assert seg_rows and raw_rows
        assert set(seg_rows[0]) == set(raw_rows[0])


class TestJoint:
    def test_rows_sorted_by_sensitivity(self, ctx):
        report = ex.run_joint_individuals(config("joint-individuals", n_seeds=1, head_epochs=40), ctx)
        assert len(report.rows) == 4  # 2 tiger + 2 leopard individuals
        sens = [r["sensitivity"] for r in report.rows]
        vals = [-1.0 if s is None else s for s in sens]
        assert vals == sorted(vals, reverse=True)

    def test_requires_two_species(self):
        specs = (synth.SpeciesSpec("tiger", "stripes", 2, 8),)
        cfg = ex.ExperimentConfig(
            protocol="joint-individuals",
            synth_config=synth.SynthConfig(image_size=64, species_specs=specs, n_negatives=4, seed=0),
            n_seeds=1,
        )
        with pytest.raises(ValueError):
            ex.run_joint_individuals(cfg)


class TestReports:
    def test_bytewise_reproducible(self, ctx, tmp_path):
        cfg = config("volume", fractions=(1.0,), n_seeds=1)
        for d in ("a", "b"):
            ex.write_report(ex.run_volume_sweep(cfg, ctx), tmp_path / d)
        match, mismatch, errors = filecmp.cmpfiles(
            tmp_path / "a", tmp_path / "b",
            ["volume_trials.csv", "volume_aggregate.csv", "config.json", "run_manifest.txt"],
            shallow=False,
        )
        assert not mismatch and not errors

    def test_report_embeds_config_and_version(self, ctx, tmp_path):
        import json

        cfg = config("volume", fractions=(1.0,), n_seeds=1)
        ex.write_report(ex.run_volume_sweep(cfg, ctx), tmp_path)
        blob = json.loads((tmp_path / "config.json").read_text())
        assert blob["version"]
        assert blob["config"]["protocol"] == "volume"
        assert blob["config"]["base_seed"] == cfg.base_seed
        manifest = (tmp_path / "run_manifest.txt").read_text()
        assert "volume_trials.csv" in manifest

    def test_undefined_rendered_in_csv(self, tmp_path):
        ex._write_rows_csv(tmp_path / "x.csv", [{"a": None, "b": 0.5}])
        assert "undefined" in (tmp_path / "x.csv").read_text()
