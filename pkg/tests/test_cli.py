import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

import planestitch
from planestitch import io as pio
from planestitch.cli import main
from planestitch.homography import Homography, decompose
from planestitch.plane_optimizer import PlaneObjective

SCHEMA = json.loads((Path(planestitch.__file__).parent / "schemas" / "result.schema.json").read_text())


def run(*argv):
    return main([str(a) for a in argv])


def write_h(path, m):
    pio.write_json(path, Homography(np.asarray(m, float)).to_json())
    return path


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", out, "--size", 512, "--seed", 7, "--h-magnitude", 0.15) == 0
    return out


@pytest.fixture(scope="module")
def stitched(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("stitch")
    code = run("stitch", synth_dir / "ref.png", synth_dir / "tgt.png", "--out", out,
               "--truth", synth_dir / "h_true.json")
    return code, out


# --- synth ----------------------------------------------------------------------

def test_synth_is_reproducible(synth_dir, tmp_path):
    assert run("synth", "--out", tmp_path, "--size", 512, "--seed", 7, "--h-magnitude", 0.15) == 0
    for name in ("ref.png", "tgt.png", "h_true.json"):
        assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()


def test_synth_rejects_bad_scene(tmp_path, capsys):
    assert run("synth", "--out", tmp_path, "--h-magnitude", 0.9) == 4
    assert "error" in capsys.readouterr().err


# --- stitch ---------------------------------------------------------------------

def test_stitch_recovers_planted_homography(stitched):
    code, out = stitched
    assert code == 0
    result = pio.read_json(out / "result.json")
    assert result["corner_error"] < 2.0
    assert result["metrics"]["mssim"] >= 0.99
    assert -1.0 <= result["sigma"] <= 2.0
    for name in ("panorama.png", "pair.a.png", "pair.b.png", "pair.a.mask.png", "pair.b.mask.png"):
        assert (out / name).exists()


def test_stitch_result_matches_schema(stitched):
    jsonschema.validate(pio.read_json(stitched[1] / "result.json"), SCHEMA)


def test_stitch_outputs_share_the_canvas(stitched):
    out = stitched[1]
    result = pio.read_json(out / "result.json")
    shape = (result["canvas"]["height"], result["canvas"]["width"])
    for name in ("panorama.png", "pair.a.png", "pair.b.png", "pair.a.mask.png", "pair.b.mask.png"):
        assert pio.read_png(out / name).shape[:2] == shape


def test_stitch_is_deterministic(synth_dir, stitched, tmp_path):
    assert run("stitch", synth_dir / "ref.png", synth_dir / "tgt.png", "--out", tmp_path,
               "--truth", synth_dir / "h_true.json") == 0
    assert (tmp_path / "panorama.png").read_bytes() == (stitched[1] / "panorama.png").read_bytes()
    ours = pio.read_json(tmp_path / "result.json")
    theirs = pio.read_json(stitched[1] / "result.json")
    ours["metrics"]["name"] = theirs["metrics"]["name"]  # the output folder name differs
    assert ours == theirs


def test_stitch_image_with_itself(synth_dir, tmp_path):
    assert run("stitch", synth_dir / "ref.png", synth_dir / "ref.png", "--out", tmp_path) == 0
    result = pio.read_json(tmp_path / "result.json")
    np.testing.assert_allclose(np.reshape(result["homography"], (3, 3)), np.eye(3), atol=1e-9)
    assert result["losses"]["coef"] < 1e-12
    np.testing.assert_array_equal(pio.read_png(tmp_path / "panorama.png"), pio.read_png(synth_dir / "ref.png"))


def test_stitch_truncated_png_exit_code(synth_dir, tmp_path, capsys):
    broken = tmp_path / "cut.png"
    broken.write_bytes((synth_dir / "ref.png").read_bytes()[:100])
    assert run("stitch", broken, synth_dir / "tgt.png", "--out", tmp_path / "o") == 3
    assert "cut.png" in capsys.readouterr().err


def test_stitch_size_mismatch_exit_code(tmp_path):
    pio.write_png(tmp_path / "a.png", np.zeros((32, 32)))
    pio.write_png(tmp_path / "b.png", np.zeros((32, 48)))
    assert run("stitch", tmp_path / "a.png", tmp_path / "b.png", "--out", tmp_path / "o") == 3


def test_stitch_bad_config_exit_code(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "run.toml"
    cfg.write_text("[sigma]\niters = 0\n")
    assert run("stitch", synth_dir / "ref.png", synth_dir / "tgt.png", "--out", tmp_path / "o",
               "--config", cfg) == 4
    assert "sigma" in capsys.readouterr().err


def test_textureless_pair_has_no_consensus(tmp_path, capsys):
    pio.write_png(tmp_path / "flat.png", np.full((128, 128), 0.5))
    assert run("stitch", tmp_path / "flat.png", tmp_path / "flat.png", "--out", tmp_path / "o") == 2
    assert capsys.readouterr().err.startswith("planestitch: error")


def test_unknown_flag_is_a_config_error():
    assert run("stitch", "a.png", "b.png", "--out", "x", "--bogus") == 4


# --- decompose ------------------------------------------------------------------

def decompose_json(capsys, *argv):
    assert run("decompose", *argv) == 0
    return json.loads(capsys.readouterr().out)


def test_decompose_identity(tmp_path, capsys):
    h = write_h(tmp_path / "h.json", np.eye(3))
    out = decompose_json(capsys, h, "--c", 0.3, 0.7, 0.1, 0.9, "--size", 320, 240)
    np.testing.assert_allclose(out["h_ref"], np.eye(3).ravel(), atol=1e-12)
    np.testing.assert_allclose(out["h_tgt"], np.eye(3).ravel(), atol=1e-12)
    assert out["l_coef"] == pytest.approx(0.0, abs=1e-12)


def test_decompose_full_coefficients_give_h(tmp_path, capsys):
    m = [[1.02, 0.05, 8.0], [-0.03, 0.97, 5.0], [1e-4, -5e-5, 1.0]]
    h = write_h(tmp_path / "h.json", m)
    out = decompose_json(capsys, h, "--c", 1, 1, 1, 1, "--size", 320, 240)
    np.testing.assert_allclose(out["h_ref"], np.eye(3).ravel(), atol=1e-9)
    np.testing.assert_allclose(out["h_tgt"], Homography(np.array(m)).m.ravel(), atol=1e-9)


def test_decompose_matches_library(tmp_path, capsys):
    m = np.array([[1.1, 0.02, -6.0], [0.04, 0.92, 3.0], [2e-4, 1e-4, 1.0]])
    h = write_h(tmp_path / "h.json", m)
    out = decompose_json(capsys, h, "--c", 0.2, 0.4, 0.6, 0.8, "--size", 200, 150)
    h_ref, h_tgt = decompose(Homography(m), (0.2, 0.4, 0.6, 0.8), 200, 150)
    np.testing.assert_allclose(out["h_ref"], h_ref.m.ravel(), atol=1e-12)
    np.testing.assert_allclose(out["h_tgt"], h_tgt.m.ravel(), atol=1e-12)
    assert set(out["scores"]) == {"ref", "tgt"}


def test_decompose_optimize_beats_fixed_planes(tmp_path, capsys):
    m = np.array([[1.25, 0.05, 10.0], [0.02, 0.9, 4.0], [6e-4, 2e-4, 1.0]])
    h = write_h(tmp_path / "h.json", m)
    out = decompose_json(capsys, h, "--optimize", "--size", 160, 120)
    objective = PlaneObjective(Homography(m), np.ones((120, 160)), np.ones((120, 160)), 160, 120)
    assert out["l_coef"] <= objective(np.ones(4)) + 1e-12
    assert out["l_coef"] <= objective(np.full(4, 0.5)) + 1e-12
    losses = [step["loss"] for step in out["trace"]["iters"]]
    assert losses == sorted(losses, reverse=True)
    assert out["trace"]["final_loss"] == pytest.approx(out["l_coef"], abs=1e-12)


def test_decompose_writes_file(tmp_path):
    h = write_h(tmp_path / "h.json", np.eye(3))
    assert run("decompose", h, "--size", 64, 64, "--out", tmp_path / "d.json") == 0
    assert pio.read_json(tmp_path / "d.json")["c_dec"] == [1.0, 1.0, 1.0, 1.0]


def test_decompose_degenerate_quad(tmp_path, capsys):
    h = write_h(tmp_path / "h.json", [[1, 0, 300], [0, 1, 300], [0, 0, 1]])
    assert run("decompose", h, "--c", 1, 0, 0, 0, "--size", 200, 200) == 4
    assert "degenerate" in capsys.readouterr().err


def test_decompose_malformed_json(tmp_path):
    (tmp_path / "h.json").write_text('{"h": [1, 2, 3]}')
    assert run("decompose", tmp_path / "h.json", "--size", 10, 10) == 4


def test_decompose_needs_a_size(tmp_path):
    h = write_h(tmp_path / "h.json", np.eye(3))
    assert run("decompose", h, "--c", 1, 1, 1, 1) == 4


# --- search-sigma ---------------------------------------------------------------

def one_hot_features(rows, cols, shift):
    """Cell (r, c) of the target carries the code of reference cell (r, c + shift)."""
    t = np.zeros((rows * cols, rows, cols), np.float32)
    for r in range(rows):
        for c in range(cols):
            if 0 <= c + shift < cols:
                t[r * cols + c + shift, r, c] = 1.0
    return t


@pytest.fixture(scope="module")
def planted_sigma(tmp_path_factory):
    """Branch flows of -7 and +3 cells on a ramp, so the fused flow vanishes at sigma = 0.7."""
    d = tmp_path_factory.mktemp("planted")
    rows, cols = 8, 64
    ramp = np.tile(np.arange(512) / 511, (64, 1))
    pio.write_png(d / "r.png", ramp)
    pio.write_png(d / "t.png", ramp)
    names = []
    for tag, shift in (("a_ref", 0), ("a_tgt", 7), ("b_ref", 0), ("b_tgt", -3)):
        pio.write_rsft(d / f"{tag}.rsft", one_hot_features(rows, cols, shift))
        names.append(d / f"{tag}.rsft")
    return d, names


def test_search_sigma_finds_planted_optimum(planted_sigma, capsys):
    d, feats = planted_sigma
    assert run("search-sigma", d / "r.png", d / "t.png", "--cell", 8, "--features", *feats,
               "--json", d / "s.json") == 0
    report = pio.read_json(d / "s.json")
    width = 3 * (2 / 3) ** 10
    assert abs(report["sigma"] - 0.7) <= width / 2 + 1e-9
    assert len(report["trace"]) == 10
    assert report["trace"][-1]["hi"] - report["trace"][-1]["lo"] == pytest.approx(width, rel=1e-9)
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("iter  1: bracket") and lines[-1].startswith("sigma=")


def test_search_sigma_more_iterations_narrow_the_bracket(planted_sigma):
    d, feats = planted_sigma
    assert run("search-sigma", d / "r.png", d / "t.png", "--cell", 8, "--features", *feats,
               "--sigma-iters", 20, "--json", d / "s20.json") == 0
    report = pio.read_json(d / "s20.json")
    width = 3 * (2 / 3) ** 20
    assert report["trace"][-1]["hi"] - report["trace"][-1]["lo"] == pytest.approx(width, rel=1e-9)
    assert abs(report["sigma"] - 0.7) <= width / 2 + 1e-9


def test_search_sigma_fixed_sweep(planted_sigma, capsys):
    d, feats = planted_sigma
    assert run("search-sigma", d / "r.png", d / "t.png", "--cell", 8, "--features", *feats,
               "--fixed", 13, "--json", d / "f.json") == 0
    report = pio.read_json(d / "f.json")
    sigmas = [p["sigma"] for p in report["sweep"]]
    assert sigmas == pytest.approx(np.linspace(-1, 2, 13).tolist())
    assert report["sigma"] == pytest.approx(0.75)


def test_search_sigma_on_identical_images(synth_dir, tmp_path):
    assert run("search-sigma", synth_dir / "ref.png", synth_dir / "ref.png", "--json", tmp_path / "s.json") == 0
    report = pio.read_json(tmp_path / "s.json")
    assert -1 <= report["sigma"] <= 2
    assert report["objective"] == pytest.approx(0.0, abs=1e-12)


def test_search_sigma_rejects_mismatched_features(planted_sigma, tmp_path):
    d, feats = planted_sigma
    pio.write_rsft(tmp_path / "small.rsft", np.zeros((4, 2, 2), np.float32))
    assert run("search-sigma", d / "r.png", d / "t.png", "--cell", 8,
               "--features", tmp_path / "small.rsft", *feats[1:]) != 0


# --- eval -----------------------------------------------------------------------

def test_eval_identical_pair(synth_dir, capsys):
    assert run("eval", "--pair", synth_dir / "ref.png", synth_dir / "ref.png") == 0
    out = capsys.readouterr().out
    assert "mPSNR  100.000" in out and "mSSIM 1.0000" in out


def test_eval_graded_noise_buckets(tmp_path):
    rng = np.random.default_rng(0)
    base = np.tile(np.linspace(0.2, 0.8, 64), (64, 1))
    for name, level in (("clean", 0.005), ("mid", 0.03), ("noisy", 0.1)):
        pio.write_png(tmp_path / f"{name}.a.png", base)
        pio.write_png(tmp_path / f"{name}.b.png", np.clip(base + rng.normal(0, level, base.shape), 0, 1))
    assert run("eval", tmp_path, "--json", tmp_path / "e.json") == 0
    result = pio.read_json(tmp_path / "e.json")
    by_name = {r["name"]: r["bucket"] for r in result["reports"]}
    assert by_name == {"clean": "Easy", "mid": "Moderate", "noisy": "Hard"}
    assert [row["bucket"] for row in result["summary"]] == ["Easy", "Moderate", "Hard", "Average"]


def test_eval_fixed_buckets_from_flag(tmp_path):
    base = np.tile(np.linspace(0.2, 0.8, 32), (32, 1))
    pio.write_png(tmp_path / "p.a.png", base)
    pio.write_png(tmp_path / "p.b.png", base)
    assert run("eval", tmp_path, "--bucket", "fixed:30,20", "--json", tmp_path / "e.json") == 0
    assert pio.read_json(tmp_path / "e.json")["reports"][0]["bucket"] == "Easy"


def test_eval_raw_pairs_and_empty_overlap(tmp_path, synth_dir):
    for stem in ("ref", "tgt"):
        (tmp_path / f"scene.{stem}.png").write_bytes((synth_dir / f"{stem}.png").read_bytes())
    (tmp_path / "scene.h.json").write_text((synth_dir / "h_true.json").read_text())
    blank = np.zeros((16, 16))
    pio.write_png(tmp_path / "gap.a.png", blank)
    pio.write_png(tmp_path / "gap.b.png", blank)
    left = np.zeros((16, 16))
    left[:, :8] = 1
    pio.write_png(tmp_path / "gap.a.mask.png", left)
    pio.write_png(tmp_path / "gap.b.mask.png", 1 - left)
    assert run("eval", tmp_path, "--json", tmp_path / "e.json") == 0
    result = pio.read_json(tmp_path / "e.json")
    assert result["skipped"] == ["gap"]
    (scene,) = result["reports"]
    assert scene["name"] == "scene" and scene["mssim"] > 0.95


def test_eval_empty_directory(tmp_path, capsys):
    assert run("eval", tmp_path) == 0
    assert "Average" in capsys.readouterr().out


def test_eval_missing_directory(tmp_path):
    assert run("eval", tmp_path / "absent") == 3
