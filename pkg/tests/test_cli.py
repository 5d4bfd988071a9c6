import json

import pytest

from icl_forge.cli import main
from icl_forge.corpus import load_dataset, save_dataset
from icl_forge.embedspace import build_index, load_embeddings_jsonl, save_embeddings_jsonl
from icl_forge.evaluation import PromptTemplate
from icl_forge.planted import make_planted_corpus
from icl_forge.scoring import PerplexityScore, save_score_file
from icl_forge.selectors import SelectorConfig, select_dpp

from conftest import make_dataset, make_example


def write_world(tmp_path, **kw):
    defaults = dict(n_clusters=4, per_cluster=10, dim=8, n_test=4, noise_rate=0.3, seed=5)
    defaults.update(kw)
    pc = make_planted_corpus(**defaults)
    save_dataset(pc.pool, tmp_path / "pool.jsonl")
    save_dataset(pc.test, tmp_path / "test.jsonl")
    save_embeddings_jsonl(pc.emb, tmp_path / "emb.jsonl")
    pc.scorer.save(tmp_path / "scorer.json")
    PromptTemplate(task="planted").save(tmp_path / "template.json")
    return pc


class TestInjectNoise:
    def test_writes_flagged_corpus(self, tmp_path):
        save_dataset(make_dataset(50), tmp_path / "pool.jsonl")
        save_dataset(make_dataset(50, task="code", prefix="d"), tmp_path / "donor.jsonl")
        rc = main(
            [
                "inject-noise",
                "--pool", str(tmp_path / "pool.jsonl"),
                "--donor", str(tmp_path / "donor.jsonl"),
                "--kind", "irrelevant",
                "--rate", "0.4",
                "--seed", "7",
                "--out", str(tmp_path / "noisy.jsonl"),
            ]
        )
        assert rc == 0
        out = load_dataset(tmp_path / "noisy.jsonl")
        assert out.noisy_count() == 20
        assert (tmp_path / "noisy.config.json").exists()

    def test_zero_rate_byte_identical(self, tmp_path):
        save_dataset(make_dataset(10), tmp_path / "pool.jsonl")
        rc = main(
            [
                "inject-noise",
                "--pool", str(tmp_path / "pool.jsonl"),
                "--kind", "irrelevant",
                "--rate", "0",
                "--seed", "1",
                "--out", str(tmp_path / "copy.jsonl"),
            ]
        )
        assert rc == 0
        assert (tmp_path / "copy.jsonl").read_bytes() == (tmp_path / "pool.jsonl").read_bytes()

    def test_bad_rate_is_usage_error(self, tmp_path, capsys):
        save_dataset(make_dataset(5), tmp_path / "pool.jsonl")
        rc = main(
            [
                "inject-noise",
                "--pool", str(tmp_path / "pool.jsonl"),
                "--rate", "1.2",
                "--out", str(tmp_path / "x.jsonl"),
            ]
        )
        assert rc == 2
        assert "rate" in capsys.readouterr().err

    def test_seed_reproducibility(self, tmp_path):
        save_dataset(make_dataset(40), tmp_path / "pool.jsonl")
        save_dataset(make_dataset(40, task="code", prefix="d"), tmp_path / "donor.jsonl")
        args = [
            "inject-noise",
            "--pool", str(tmp_path / "pool.jsonl"),
            "--donor", str(tmp_path / "donor.jsonl"),
            "--kind", "irrelevant",
            "--rate", "0.5",
            "--seed", "3",
        ]
        main(args + ["--out", str(tmp_path / "a.jsonl")])
        main(args + ["--out", str(tmp_path / "b.jsonl")])
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


class TestImportEmbeddings:
    def test_jsonl_to_packed_round_trip(self, tmp_path):
        pc = write_world(tmp_path)
        rc = main(
            [
                "import-embeddings",
                "--from", "jsonl",
                "--in", str(tmp_path / "emb.jsonl"),
                "--out", str(tmp_path / "emb.f32"),
            ]
        )
        assert rc == 0
        rc = main(
            [
                "import-embeddings",
                "--from", "packed",
                "--in", str(tmp_path / "emb.f32"),
                "--out", str(tmp_path / "emb2.jsonl"),
            ]
        )
        assert rc == 0
        back = load_embeddings_jsonl(tmp_path / "emb2.jsonl")
        assert back.ids == pc.emb.ids


class TestScore:
    def test_synthetic_scoring_writes_score_file(self, tmp_path):
        write_world(tmp_path)
        rc = main(
            [
                "score",
                "--pool", str(tmp_path / "pool.jsonl"),
                "--scorer", f"synthetic:{tmp_path / 'scorer.json'}",
                "--out", str(tmp_path / "scores.jsonl"),
                "--cache", str(tmp_path / "cache.jsonl"),
            ]
        )
        assert rc == 0
        lines = (tmp_path / "scores.jsonl").read_text().strip().splitlines()
        assert len(lines) == 40
        rec = json.loads(lines[0])
        assert set(rec) == {"id", "perplexity", "backend_tag"}


class TestSelect:
    def test_topk_with_lpr_schema(self, tmp_path):
        write_world(tmp_path)
        out_dir = tmp_path / "out"
        rc = main(
            [
                "select",
                "--pool", str(tmp_path / "pool.jsonl"),
                "--test", str(tmp_path / "test.jsonl"),
                "--embeddings", str(tmp_path / "emb.jsonl"),
                "--selector", "topk",
                "--k-demos", "8",
                "--lpr",
                "--scorer", f"synthetic:{tmp_path / 'scorer.json'}",
                "--out-dir", str(out_dir),
            ]
        )
        assert rc == 0
        selections = [json.loads(l) for l in (out_dir / "selections.jsonl").read_text().splitlines()]
        assert len(selections) == 4
        for sel in selections:
            assert len(sel["demo_ids"]) == 8
            assert sel["provenance"] == "lpr_filtered"
        audit = [json.loads(l) for l in (out_dir / "lpr_audit.jsonl").read_text().splitlines()]
        assert all({"test_id", "original_id", "flag", "rank_fraction"} <= set(a) for a in audit)
        assert (out_dir / "select.config.json").exists()

    def test_missing_embeddings_file_exits_2(self, tmp_path, capsys):
        write_world(tmp_path)
        rc = main(
            [
                "select",
                "--pool", str(tmp_path / "pool.jsonl"),
                "--test", str(tmp_path / "test.jsonl"),
                "--embeddings", str(tmp_path / "nope.jsonl"),
                "--out-dir", str(tmp_path / "out"),
            ]
        )
        assert rc == 2
        assert "nope.jsonl" in capsys.readouterr().err

    def test_dpp_parity_with_library(self, tmp_path):
        pc = write_world(tmp_path)
        out_dir = tmp_path / "out"
        rc = main(
            [
                "select",
                "--pool", str(tmp_path / "pool.jsonl"),
                "--test", str(tmp_path / "test.jsonl"),
                "--embeddings", str(tmp_path / "emb.jsonl"),
                "--selector", "dpp",
                "--k-demos", "4",
                "--dpp-pool", "20",
                "--out-dir", str(out_dir),
            ]
        )
        assert rc == 0
        selections = {
            json.loads(l)["test_id"]: json.loads(l)["demo_ids"]
            for l in (out_dir / "selections.jsonl").read_text().splitlines()
        }
        index = build_index(pc.emb, pool_ids=pc.pool.ids())
        cfg = SelectorConfig(method="dpp", K=4, candidate_pool_size=20, seed=0)
        for ex in pc.test.examples:
            want = select_dpp(pc.pool, index, ex, cfg)
            assert selections[ex.id] == list(want.demo_ids)

    def test_config_file_precedence(self, tmp_path):
        write_world(tmp_path)
        config = {
            "pool": str(tmp_path / "pool.jsonl"),
            "test": str(tmp_path / "test.jsonl"),
            "embeddings": str(tmp_path / "emb.jsonl"),
            "selector": "topk",
            "k_demos": 3,
        }
        (tmp_path / "run.json").write_text(json.dumps(config))
        out_dir = tmp_path / "out"
        rc = main(
            [
                "select",
                "--config", str(tmp_path / "run.json"),
                "--k-demos", "5",  # flag overrides the config file
                "--out-dir", str(out_dir),
            ]
        )
        assert rc == 0
        sel = json.loads((out_dir / "selections.jsonl").read_text().splitlines()[0])
        assert len(sel["demo_ids"]) == 5
        echoed = json.loads((out_dir / "select.config.json").read_text())
        assert echoed["k_demos"] == 5


class TestEvaluate:
    def eval_args(self, tmp_path, out_dir, extra=()):
        return [
            "evaluate",
            "--pool", str(tmp_path / "pool.jsonl"),
            "--test", str(tmp_path / "test.jsonl"),
            "--embeddings", str(tmp_path / "emb.jsonl"),
            "--template", str(tmp_path / "template.json"),
            "--selector", "topk",
            "--k-demos", "4",
            "--inference", "echo:reference",
            "--metric", "em",
            "--seeds", "1,2,3",
            "--out-dir", str(out_dir),
            *extra,
        ]

    def test_reference_echo_em_100(self, tmp_path, capsys):
        write_world(tmp_path)
        rc = main(self.eval_args(tmp_path, tmp_path / "out"))
        assert rc == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["mean"] == 100.0
        assert report["n_runs"] == 3
        assert "100.00" in capsys.readouterr().out

    def test_lpr_flag_keeps_em_100(self, tmp_path):
        write_world(tmp_path)
        rc = main(
            self.eval_args(
                tmp_path,
                tmp_path / "out",
                extra=["--lpr", "--scorer", f"synthetic:{tmp_path / 'scorer.json'}"],
            )
        )
        assert rc == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["mean"] == 100.0
        assert report["lpr_enabled"] is True

    def test_three_seeds_emit_std(self, tmp_path):
        write_world(tmp_path)
        rc = main(
            self.eval_args(tmp_path, tmp_path / "out", extra=["--selector", "random"])
        )
        assert rc == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["n_runs"] == 3
        assert report["std"] >= 0.0

    def test_per_example_sidecar(self, tmp_path):
        write_world(tmp_path)
        rc = main(self.eval_args(tmp_path, tmp_path / "out", extra=["--per-example"]))
        assert rc == 0
        lines = (tmp_path / "out" / "per_example.jsonl").read_text().splitlines()
        recs = [json.loads(l) for l in lines]
        assert len(recs) == 12  # 4 test inputs x 3 seeds
        assert {"id", "prediction", "score", "demo_ids", "seed"} <= set(recs[0])

    def test_determinism_byte_identical_reports(self, tmp_path):
        write_world(tmp_path)
        main(self.eval_args(tmp_path, tmp_path / "out1"))
        main(self.eval_args(tmp_path, tmp_path / "out2"))
        a = (tmp_path / "out1" / "report.json").read_bytes()
        b = (tmp_path / "out2" / "report.json").read_bytes()
        assert a == b

    def test_partial_failures_over_threshold_exit_1(self, tmp_path, capsys):
        write_world(tmp_path)
        # a score file that knows none of the pool ids: every example fails
        save_score_file({"zz": PerplexityScore("zz", 5.0, "m")}, tmp_path / "scores.jsonl")
        rc = main(
            self.eval_args(
                tmp_path,
                tmp_path / "out",
                extra=["--global-rank", "--scorer", f"file:{tmp_path / 'scores.jsonl'}"],
            )
        )
        assert rc == 1
        assert "failed" in capsys.readouterr().err


class TestBench:
    def bench_args(self, tmp_path, out_dir):
        return [
            "bench",
            "--pool", str(tmp_path / "pool.jsonl"),
            "--test", str(tmp_path / "test.jsonl"),
            "--embeddings", str(tmp_path / "emb.jsonl"),
            "--scorer", f"synthetic:{tmp_path / 'scorer.json'}",
            "--k-demos", "8",
            "--lpr-k", "4",
            "--dpp-pool", "30",
            "--out-dir", str(out_dir),
        ]

    def test_local_needs_fewer_scores_than_global(self, tmp_path):
        write_world(tmp_path, n_clusters=6, per_cluster=15, n_test=6)
        out_dir = tmp_path / "bench"
        rc = main(self.bench_args(tmp_path, out_dir))
        assert rc == 0
        report = json.loads((out_dir / "bench_report.json").read_text())
        assert report["local"]["unique_scores"] < report["global"]["unique_scores"]
        assert report["local"]["unique_scores"] <= report["local"]["bound"]
        assert report["global"]["requests"] == report["global_candidates"] * report["n_test"]
        assert "wall_seconds" in report

    def test_cache_warm_rerun_makes_zero_calls(self, tmp_path):
        write_world(tmp_path)
        out_dir = tmp_path / "bench"
        main(self.bench_args(tmp_path, out_dir))
        rc = main(self.bench_args(tmp_path, out_dir))
        assert rc == 0
        report = json.loads((out_dir / "bench_report.json").read_text())
        assert report["local"]["unique_scores"] == 0
        assert report["global"]["unique_scores"] == 0

    def test_report_schema_and_determinism(self, tmp_path):
        write_world(tmp_path)
        main(self.bench_args(tmp_path, tmp_path / "b1"))
        main(self.bench_args(tmp_path, tmp_path / "b2"))
        a = json.loads((tmp_path / "b1" / "bench_report.json").read_text())
        b = json.loads((tmp_path / "b2" / "bench_report.json").read_text())
        a.pop("wall_seconds"), b.pop("wall_seconds")
        assert a == b
        assert set(a) == {
            "n_test", "k_demos", "lpr_k", "global_candidates", "local", "global"
        }


class TestReport:
    def test_prints_table(self, tmp_path, capsys):
        write_world(tmp_path)
        main(
            [
                "evaluate",
                "--pool", str(tmp_path / "pool.jsonl"),
                "--test", str(tmp_path / "test.jsonl"),
                "--embeddings", str(tmp_path / "emb.jsonl"),
                "--selector", "topk",
                "--k-demos", "4",
                "--inference", "echo:reference",
                "--seeds", "1",
                "--out-dir", str(tmp_path / "out"),
            ]
        )
        capsys.readouterr()
        rc = main(["report", str(tmp_path / "out" / "report.json")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "dataset" in out and "topk" in out and "100.00" in out
