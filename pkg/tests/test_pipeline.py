import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from alsstrat import cli, pipeline
from alsstrat.config import DEFAULTS, config_hash, dump_toml, load_config
from alsstrat.exceptions import ConfigError
from alsstrat.pointcloud import read_las
from alsstrat.stats import tile_stats
from alsstrat.synthetic import make_corpus


@pytest.fixture(scope="module")
def fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    info = make_corpus(root, projects=2, side=2000.0, density=0.01, seed=5)
    return info


def cfg_for(fixture, out, **plan):
    over = {
        "out": str(out),
        "workers": 2,
        "backend": {"source": str(fixture["corpus"]), "cache": str(Path(out) / "cache")},
        "plan": {"rasters": str(fixture["rasters"]), "cap": 10, **plan},
    }
    return load_config(None, over)


def test_defaults_match_reference_values():
    assert DEFAULTS["plan"]["patch_size"] == 500 and DEFAULTS["plan"]["cap"] == 40
    assert DEFAULTS["plan"]["slope_thresholds"] == [5.0, 17.0]
    p = DEFAULTS["prep"]
    assert (p["voxel_size"], p["max_voxels"], p["max_points_per_voxel"]) == (0.6, 200_000, 5)
    assert (p["bev_cell"], p["max_cells"], p["max_points_per_cell"]) == ([4.8, 4.8, 288.0], 200_000, 30)
    assert p["crop_size"] == 144 and DEFAULTS["tile"]["window"] == 100
    assert DEFAULTS["workers"] == 8


def test_config_file_and_errors(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text('seed = 7\n[plan]\ncap = 12\npatch_size = 250\n[tile]\nstride = 50\n')
    cfg = load_config(f)
    assert cfg["seed"] == 7 and cfg["plan"]["cap"] == 12 and cfg["plan"]["patch_size"] == 250.0
    assert cfg["tile"]["stride"] == 50.0
    assert load_config(f, {"seed": 8})["seed"] == 8
    f2 = tmp_path / "rt.toml"
    f2.write_text(dump_toml(cfg))
    assert load_config(f2) == cfg
    for bad in ('[plan]\nbogus = 1\n', '[plan]\ncap = "x"\n', '[tile]\nstride = 500\n', '[prep]\nmask_ratio = 1.0\n',
                'seed = [', '[plan]\nmethod = "other"\n'):
        f.write_text(bad)
        with pytest.raises(ConfigError):
            load_config(f)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_config_hash_ignores_runtime_settings():
    a = load_config(None, {"workers": 1, "out": "a"})
    b = load_config(None, {"workers": 4, "out": "b", "backend": {"cache": "/x"}})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(load_config(None, {"seed": 1}))


def test_plan_caps_and_recount(fixture, tmp_path):
    res = pipeline.plan(cfg_for(fixture, tmp_path))
    assert res.exit_code == 0
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    rows = [json.loads(line) for line in lines]
    per = Counter(r["project_id"] for r in rows)
    assert set(per) == {"proj00", "proj01"} and max(per.values()) <= 10
    assert all(r["landcover"] in ("Developed", "Forest") for r in rows)
    recount = Counter((r["slope"], r["landcover"]) for r in rows)
    counts = res.summary["counts"]
    for (sl, lc), n in recount.items():
        assert counts[sl][lc] == n
    assert counts["All"]["All"] == len(rows)
    log = [json.loads(line) for line in (tmp_path / "logs/plan.jsonl").read_text().splitlines()]
    assert log[0]["event"] == "start" and log[0]["seed"] == 0
    assert len({e["config_hash"] for e in log}) == 1


def test_plan_empty_pool(fixture, tmp_path):
    res = pipeline.plan(cfg_for(fixture, tmp_path, allowed_landcover=["Barren"]))
    assert res.exit_code == 0
    assert (tmp_path / "manifest.jsonl").read_bytes() == b""
    assert any(e["event"] == "warning" for e in map(json.loads, (tmp_path / "logs/plan.jsonl").read_text().splitlines()))


def test_plan_deterministic(fixture, tmp_path):
    pipeline.plan(cfg_for(fixture, tmp_path / "a"))
    pipeline.plan(cfg_for(fixture, tmp_path / "b"))
    for name in ("manifest.jsonl", "plan_summary.json", "logs/plan.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fetch_partial_failure_and_cache(fixture, tmp_path):
    cfg = cfg_for(fixture, tmp_path)
    pipeline.plan(cfg)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()[:10]
    bad = json.loads(lines[3])
    bad["project_id"] = "ghost"
    lines[3] = json.dumps(bad)
    m = tmp_path / "m.jsonl"
    m.write_text("\n".join(lines) + "\n")
    res = pipeline.fetch(cfg, m)
    assert res.exit_code == 2 and res.summary["fetched"] == 9 and len(res.errors) == 1
    assert "ghost" in res.errors[0]
    assert len(list((tmp_path / "tiles").rglob("*.las"))) == 9
    again = pipeline.fetch(cfg, m)
    assert again.summary["downloads"] == 0 and again.summary["cache_hits"] == 9


def test_downstream_commands(fixture, tmp_path):
    cfg = cfg_for(fixture, tmp_path)
    pipeline.plan(cfg)
    assert pipeline.fetch(cfg).exit_code == 0
    index = [json.loads(line) for line in (tmp_path / "tiles/index.jsonl").read_text().splitlines()]

    st = pipeline.stats(cfg)
    assert st.exit_code == 0
    report = json.loads((tmp_path / "stats_report.json").read_text())
    dens = [tile_stats(read_las(tmp_path / "tiles" / r["path"])).density for r in index]
    assert report["cells"]["All/All"]["density_mean"] == pytest.approx(np.mean(dens), rel=1e-9)
    assert report["tiles"] == len(index)

    pr = pipeline.prep(cfg)
    assert pr.exit_code == 0 and pr.summary["samples"] == len(index)
    from alsstrat.maeprep import read_sample

    sid = json.loads((tmp_path / "samples/MANIFEST.jsonl").read_text().splitlines()[0])["sample_id"]
    side, arrays = read_sample(tmp_path / "samples", sid)
    for item in side["arrays"]:
        assert list(arrays[item["name"]].shape) == item["shape"]
    assert (tmp_path / "samples" / f"{sid}.bin").stat().st_size == sum(a["nbytes"] for a in side["arrays"])

    tl = pipeline.tile(cfg)
    assert tl.exit_code == 0
    assert tl.summary["windows"] == 25 * len(index)
    windows = (tmp_path / "windows/index.jsonl").read_text().splitlines()
    assert len(windows) == 25 * len(index)
    first = json.loads(windows[0])
    assert (tmp_path / "windows" / first["path"]).exists()


def test_eval_command(tmp_path):
    (tmp_path / "p.csv").write_text("id,label\n" + "".join(f"{i},{i % 3}\n" for i in range(30)))
    cfg = load_config(None, {"out": str(tmp_path / "o")})
    res = pipeline.evaluate(cfg, tmp_path / "p.csv", tmp_path / "p.csv")
    assert res.summary["miou"] == 1.0 and res.summary["oa"] == 1.0
    assert json.loads((tmp_path / "o/eval_report.json").read_text())["num_classes"] == 3


def test_cli_main(fixture, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ALSSTRAT_CACHE", str(tmp_path / "cache"))
    out = tmp_path / "o"
    rc = cli.main(["plan", "--corpus", str(fixture["corpus"]), "--rasters", str(fixture["rasters"]),
                   "--out", str(out), "--seed", "3", "--workers", "2", "--cap", "5"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "Flat" in text and "Developed" in text
    assert cli.main(["fetch", "--corpus", str(fixture["corpus"]), "--out", str(out), "--seed", "3"]) == 0
    assert (tmp_path / "cache" / "tiles").is_dir()
    assert cli.main(["tile", "--out", str(out), "--stride", "50", "--seed", "3"]) == 0
    capsys.readouterr()
    n_tiles = len((out / "tiles/index.jsonl").read_text().splitlines())
    assert len((out / "windows/index.jsonl").read_text().splitlines()) == 81 * n_tiles
    assert cli.main(["plan", "--out", str(out)]) == 1  # no corpus/rasters configured
    assert "not set" in capsys.readouterr().err
    cfgfile = tmp_path / "c.toml"
    cfgfile.write_text("[plan]\nunknown = 1\n")
    assert cli.main(["stats", "--config", str(cfgfile)]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
