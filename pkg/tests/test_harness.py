import json
import pathlib
import shutil

import pytest
from hypothesis import given, settings, strategies as st

import hetsched
from hetsched.bngrad import load_suite
from hetsched.errors import ConfigError, EmptyResults
from hetsched.harness import EpisodeRecord, emit_report, load_config, make_instances, run_scheduler, summarize
from hetsched.harness.cli import main
from hetsched.harness.config import InstanceSpec
from hetsched.simenv import oracle_schedule, random_bundle


def toy_record(scheduler, i, makespan):
    # reference makespan 2 with kernel finishes 1 and 2; the scheduled kernels
    # finish at makespan/2 and makespan, so loss = makespan/2 - 1
    return EpisodeRecord("inst%d" % i, scheduler, makespan, 2.0, "oracle", {0: makespan / 2, 1: makespan},
                         [0, 0], {0: 1.0, 1: 2.0}, invocations=2)


def toy_set():
    a = [2.0, 2.3, 3.0, 2.2, 4.0]
    b = [2.0, 2.0, 2.6, 2.1, 2.8]
    return [toy_record("a", i, m) for i, m in enumerate(a)] + [toy_record("b", i, m) for i, m in enumerate(b)]


class TestReport:
    def test_hand_medians(self):
        s = summarize(toy_set())
        # a: normalized 1, 1.15, 1.5, 1.1, 2  -> median 1.15; losses median 0.15
        # b: normalized 1, 1, 1.3, 1.05, 1.4  -> median 1.05; losses median 0.05
        assert s["a"]["normalized_makespan"]["median"] == pytest.approx(1.15)
        assert s["b"]["normalized_makespan"]["median"] == pytest.approx(1.05)
        assert s["a"]["loss"]["median"] == pytest.approx(0.15)
        assert s["b"]["loss"]["median"] == pytest.approx(0.05)
        assert s["a"]["buckets"] == pytest.approx({"no_loss": 20.0, "0-20%": 40.0, ">20%": 40.0})
        assert s["b"]["buckets"] == pytest.approx({"no_loss": 40.0, "0-20%": 20.0, ">20%": 40.0})

    def test_empty(self):
        with pytest.raises(EmptyResults):
            summarize([])

    def test_rerun_byte_identical(self, tmp_path):
        emit_report(toy_set(), tmp_path / "x")
        emit_report(toy_set(), tmp_path / "y")
        for f in ("report.csv", "kernels.csv", "summary.json"):
            assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()

    def test_report_rows(self, tmp_path):
        emit_report(toy_set(), tmp_path)
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert len(lines) == 11 and lines[0].startswith("instance,workload,scheduler")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(1.0, 5.0), min_size=1, max_size=30))
    def test_buckets_sum_to_100(self, ratios):
        recs = [toy_record("s", i, 2.0 * r) for i, r in enumerate(ratios)]
        assert abs(sum(summarize(recs)["s"]["buckets"].values()) - 100.0) <= 0.1

    def test_oracle_against_itself(self):
        recs = [run_scheduler(b, "oracle", i)[0] for i, b in enumerate(random_bundle(s) for s in range(5))]
        s = summarize(recs)["oracle"]
        assert s["buckets"]["no_loss"] == 100.0
        assert s["kernel_ratio"]["min"] == s["kernel_ratio"]["max"] == 1.0

    def test_baselines_dominated(self):
        for seed in range(5):
            b = random_bundle(seed)
            ref = oracle_schedule(b)[0]
            for sched in ("random", "sjf"):
                rec, trace = run_scheduler(b, sched, seed)
                assert rec.makespan >= ref - 1e-9 and rec.reference == pytest.approx(ref)
                assert trace and trace[0]["scheduler"] == sched


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.scheduler == "agent" and cfg.instances.count == 50

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"schedular": "sjf"}))
        with pytest.raises(ConfigError):
            load_config(p)

    def test_unknown_scheduler(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"scheduler": "paragon"})

    def test_unknown_train_option(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"train": {"momentum": 0.9}})

    def test_digest_stable(self):
        assert load_config().digest() == load_config().digest()
        assert load_config().digest() != load_config(overrides={"seed": 3}).digest()

    def test_template_instances(self):
        bs = make_instances(InstanceSpec(generator="template", count=3, template="eeg-like", sizes=[5]))
        assert [b.name for b in bs] == ["eeg-like-0", "eeg-like-1", "eeg-like-2"]
        assert all(len(b.workloads[0]) == 5 for b in bs)


def run_cli(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


class TestCli:
    def test_oracle(self, capsys, tmp_path):
        b = random_bundle(3)
        b.save(tmp_path / "tiny.json")
        rc, out, _ = run_cli(capsys, "oracle", "--instance", tmp_path / "tiny.json")
        assert rc == 0
        assert json.loads(out)["makespan"] == pytest.approx(oracle_schedule(b)[0])

    def test_oracle_out_writes_manifest(self, capsys, tmp_path):
        random_bundle(2).save(tmp_path / "tiny.json")
        rc, _, _ = run_cli(capsys, "oracle", "--instance", tmp_path / "tiny.json", "--out", tmp_path / "o")
        man = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert rc == 0 and "oracle.json" in man["artifacts"] and len(man["config_sha256"]) == 64

    def test_evaluate_random_rows(self, capsys, tmp_path):
        out = tmp_path / "ev"
        rc, _, _ = run_cli(capsys, "evaluate", "--scheduler", "random", "--instances", 50, "--seed", 1,
                           "--serial", "--out", out)
        assert rc == 0
        assert len((out / "report.csv").read_text().splitlines()) == 51
        man = json.loads((out / "manifest.json").read_text())
        assert set(man["artifacts"]) >= {"report.csv", "summary.json", "trace.jsonl"}
        assert man["seeds"]["seed"] == 1 and "versions" in man

    def test_missing_instance(self, capsys, tmp_path):
        rc, _, err = run_cli(capsys, "oracle", "--instance", tmp_path / "nope.json")
        assert rc == 2 and json.loads(err)["error"] == "CliError"

    def test_bad_scheduler(self, capsys):
        rc, _, err = run_cli(capsys, "evaluate", "--scheduler", "bogus")
        assert rc == 2 and "message" in json.loads(err)

    def test_bad_config(self, capsys, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        rc, _, err = run_cli(capsys, "evaluate", "--config", p)
        assert rc == 2 and json.loads(err)["error"] == "ConfigError"

    def test_too_large_oracle(self, capsys, tmp_path):
        from hetsched.simenv import wide_bundle
        wide_bundle(0).save(tmp_path / "w.json")
        rc, _, err = run_cli(capsys, "oracle", "--instance", tmp_path / "w.json")
        assert rc == 2 and json.loads(err)["error"] == "TooLarge"

    def test_gradcheck_single_network(self, capsys, tmp_path):
        src = tmp_path / "suite"
        src.mkdir()
        shutil.copy(pathlib.Path(hetsched.__file__).parent / "data" / "small_bns" / "chain3.json", src)
        rc, out, _ = run_cli(capsys, "gradcheck", "--suite", src, "--out", tmp_path / "g")
        assert rc == 0 and out.strip().splitlines()[-1].endswith("PASS")
        assert json.loads((tmp_path / "g" / "gradcheck.json").read_text())[0]["passed"]
        assert len(load_suite(src)) == 1

    def test_simulate(self, capsys, tmp_path):
        rc, out, _ = run_cli(capsys, "simulate", "--scheduler", "sjf", "--seed", 4, "--out", tmp_path / "s")
        assert rc == 0 and json.loads(out)["instance"] == "random-4"
        assert (tmp_path / "s" / "trace.jsonl").exists()

    def test_train_and_sweep_serial_reproducible(self, capsys, tmp_path):
        cfg = {"seed": 2, "iterations": 2, "train": {"n_s": 4, "bn_samples": 200, "belief_samples": 64},
               "train_instances": {"count": 3, "seed": 7}, "instances": {"count": 2, "seed": 9}}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        for d in ("a", "b"):
            assert run_cli(capsys, "train", "--config", p, "--serial", "--out", tmp_path / d)[0] == 0
        for f in ("train_log.csv", "checkpoint.json", "manifest.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        rc, out, _ = run_cli(capsys, "sweep-batch", "--config", p, "--serial", "--batch-sizes", "1,4",
                             "--checkpoint", tmp_path / "a" / "checkpoint.json", "--out", tmp_path / "sw")
        assert rc == 0 and out.count("batch_size=") == 2
        rows = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
        assert rows[0] == "batch_size,instance,makespan,invocations" and len(rows) == 5


def test_bucket_boundaries():
    from hetsched.harness.report import bucket_of
    assert bucket_of(0.0) == "no_loss" and bucket_of(0.1) == "0-20%" and bucket_of(0.5) == ">20%"
