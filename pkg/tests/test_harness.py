import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadetrack.ablation import ARMS, arm_config, run_ablation, standard_suite
from cascadetrack.cli import main
from cascadetrack.config import Config
from cascadetrack.evaluation import (
    AnnotationError,
    eval_ope,
    format_annotations,
    parse_annotations,
    read_annotations,
    write_annotations,
)
from cascadetrack.geometry import Box
from cascadetrack.overlay import RED, render_overlay
from cascadetrack.pnm import PnmError, decode_pnm, encode_pnm, read_pnm
from cascadetrack.sequences import load_frames, load_groundtruth, write_sequence
from cascadetrack.synth import PatchSpec, SyntheticSceneSpec, gen_sequence, standard_spec

# -- metrics ------------------------------------------------------------------


def _boxes(rng, n):
    return [Box(rng.uniform(50, 200), rng.uniform(50, 200), rng.uniform(10, 60), rng.uniform(10, 60)) for _ in range(n)]


def test_perfect_prediction():
    gt = [Box(50 + t, 60, 30, 20) for t in range(11)]
    res = eval_ope(gt, gt)
    assert res.precision == 1.0
    assert res.per_frame_iou == [1.0] * 10
    assert res.success_auc == pytest.approx(20 / 21)
    assert len(res.success_curve) == 21


def test_disjoint_prediction():
    gt = [Box(50, 50, 20, 20)] * 5
    pred = [Box(300, 300, 20, 20)] * 5
    res = eval_ope(pred, gt)
    assert res.success_auc == 0.0 and res.precision == 0.0


def test_constant_ten_pixel_offset():
    gt = [Box(100, 100, 40, 40)] * 6
    pred = [Box(110, 100, 40, 40)] * 6
    res = eval_ope(pred, gt)
    assert res.precision == 1.0
    assert res.per_frame_center_error == pytest.approx([10.0] * 5)


def test_eval_length_checks():
    with pytest.raises(ValueError):
        eval_ope([Box(1, 1, 1, 1)] * 3, [Box(1, 1, 1, 1)] * 4)
    with pytest.raises(ValueError):
        eval_ope([Box(1, 1, 1, 1)], [Box(1, 1, 1, 1)])


def test_metrics_are_permutation_covariant(rng):
    gt, pred = _boxes(rng, 21), _boxes(rng, 21)
    perm = np.concatenate([[0], 1 + rng.permutation(20)])
    a = eval_ope(pred, gt)
    b = eval_ope([pred[i] for i in perm], [gt[i] for i in perm])
    assert a.precision == b.precision and a.success_auc == b.success_auc
    assert [a.per_frame_iou[i - 1] for i in perm[1:]] == b.per_frame_iou
    assert 0.0 <= a.success_auc <= 1.0


def test_json_keys():
    gt = [Box(10, 10, 5, 5)] * 3
    assert set(eval_ope(gt, gt, fps=12.5).to_json_dict()) == {"precision", "success_auc", "per_frame_iou", "fps"}


# -- annotations --------------------------------------------------------------


def test_annotation_parse_and_center_form():
    (b,) = parse_annotations("10,20,30,40\n")
    assert b.as_array().tolist() == [25.0, 40.0, 30.0, 40.0]
    assert parse_annotations("10\t20\t30\t40") == [b]


def test_annotation_errors_name_the_line():
    with pytest.raises(AnnotationError, match="line 1"):
        parse_annotations("10,20,30")
    with pytest.raises(AnnotationError, match="line 2"):
        parse_annotations("1,2,3,4\n1,2,x,4\n")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-500, 500), st.floats(-500, 500), st.floats(0.01, 500), st.floats(0.01, 500)), min_size=1, max_size=8))
def test_annotation_round_trip(rows):
    boxes = [Box.from_corner(*r) for r in rows]
    text = format_annotations(boxes)
    assert text.endswith("\n") and "\r" not in text
    back = parse_annotations(text)
    for a, b in zip(boxes, back):
        assert np.abs(np.array(a.to_corner()) - np.array(b.to_corner())).max() <= 1e-6 + 1e-12
    assert format_annotations(back) == text


def test_annotation_file_round_trip(tmp_path):
    boxes = [Box.from_corner(1.5, 2.25, 30.125, 40.0), Box.from_corner(0, 0, 1, 1)]
    write_annotations(tmp_path / "a.txt", boxes)
    assert (tmp_path / "a.txt").read_bytes() == b"1.5,2.25,30.125,40\n0,0,1,1\n"
    assert read_annotations(tmp_path / "a.txt") == boxes


# -- overlay and images -------------------------------------------------------


def test_overlay_empty_is_identity():
    img = np.arange(60, dtype=np.uint8).reshape(1, 6, 10)
    assert np.array_equal(render_overlay(img, []), img)


def test_overlay_unit_box_recolors_one_cell_border():
    img = np.zeros((3, 8, 8), np.uint8)
    out = render_overlay(img, [(Box.from_corner(3, 2, 1, 1), RED)])
    changed = np.argwhere(out.any(axis=0))
    assert changed.tolist() == [[2, 3], [2, 4], [3, 3], [3, 4]]
    assert out[:, 2, 3].tolist() == list(RED)


def test_overlay_clips_out_of_canvas(tmp_path):
    img = np.zeros((1, 10, 10), np.uint8)
    out = render_overlay(img, [(Box(0, 0, 8, 8), RED), (Box(500, 500, 4, 4), RED)], tmp_path / "o.ppm")
    assert out.shape == (3, 10, 10)
    assert out[:, 4, :5].any() and out[:, :5, 4].any()
    assert np.array_equal(read_pnm(tmp_path / "o.ppm"), out)


def test_pnm_round_trip_and_errors(rng):
    for c in (1, 3):
        px = rng.integers(0, 256, (c, 5, 7)).astype(np.uint8)
        assert np.array_equal(decode_pnm(encode_pnm(px)), px)
    assert np.array_equal(decode_pnm(b"P5\n# note\n2 1\n255\n\x01\x02"), [[[1, 2]]])
    with pytest.raises(PnmError):
        decode_pnm(b"P2\n1 1\n255\n0")
    with pytest.raises(PnmError):
        decode_pnm(b"P5\n4 4\n255\n\x00")


# -- synthetic sequences ------------------------------------------------------


def test_static_spec_has_identical_boxes():
    spec = SyntheticSceneSpec(target=PatchSpec(2, 100.0, 100.0, 40.0, 30.0), frames=6)
    _, gt = gen_sequence(spec)
    assert all(b == gt[0] for b in gt)


def test_velocity_gives_arithmetic_centers():
    spec = SyntheticSceneSpec(target=PatchSpec(2, 100.0, 100.0, 40.0, 30.0, vx=2.0), frames=8)
    _, gt = gen_sequence(spec)
    assert [b.cx for b in gt] == [100.0 + 2 * t for t in range(8)]
    assert {b.cy for b in gt} == {100.0}


def test_generation_is_deterministic():
    spec = standard_spec(5, "sim0.5", frames=5)
    a, ga = gen_sequence(spec)
    b, gb = gen_sequence(spec)
    assert ga == gb and all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSceneSpec(target=PatchSpec(1, 40.0, 100.0, 64.0, 64.0, vx=-5.0), frames=10).validate()
    bad = SyntheticSceneSpec(distractors=[PatchSpec(2, 100.0, 100.0, 20.0, 20.0, similarity=1.5)])
    with pytest.raises(ValueError):
        bad.validate()
    with pytest.raises(ValueError):
        standard_spec(1, "sim0.7")


def test_standard_suite_shape():
    specs = standard_suite("sim0.9", range(1, 21))
    assert [s.seed for s in specs] == list(range(1, 21))
    for s in specs:
        assert s.frames == 100 and (s.target.w, s.target.h) == (64.0, 64.0)
        assert len(s.distractors) == 2 and all(d.similarity == 0.9 for d in s.distractors)
    assert standard_suite("none", [1])[0].distractors == []


def test_spec_json_round_trip():
    spec = standard_spec(2, "sim0.9")
    assert SyntheticSceneSpec.from_json(spec.to_json()) == spec


def test_sequence_directory_round_trip(tmp_path):
    frames, gt = gen_sequence(standard_spec(1, "none", frames=3))
    write_sequence(tmp_path / "seq", frames, gt)
    back = load_frames(tmp_path / "seq")
    assert all(np.array_equal(a.data, b.data) for a, b in zip(frames, back))
    assert np.allclose([b.as_array() for b in load_groundtruth(tmp_path / "seq")], [b.as_array() for b in gt], atol=1e-6)


# -- ablation runner ----------------------------------------------------------


def test_arm_configs_change_one_toggle():
    base = Config()
    assert arm_config(base, "parallel") == base.replace(refinement="parallel")
    assert arm_config(base, "cascaded") == base
    with pytest.raises(ValueError):
        arm_config(base, "everything")
    assert set(ARMS) >= {"cascaded", "parallel", "joint", "identifier", "discriminator", "proialign", "roialign"}


def test_run_ablation_small():
    table = run_ablation(standard_suite("sim0.5", [1], frames=6), Config(), ["cascaded", "parallel"])
    out = table.to_json_dict()
    assert set(out["arms"]) == {"cascaded", "parallel"}
    assert 0.0 <= out["comparisons"]["cascaded>=parallel"] <= 1.0
    # cascaded is the default config, so "joint" aliases the same run
    t2 = run_ablation(standard_suite("sim0.5", [1], frames=6), Config(), ["cascaded", "joint"])
    assert t2.arms["cascaded"] is t2.arms["joint"]


# -- CLI ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def seq_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = standard_spec(2, "none", frames=12)
    (root / "spec.json").write_text(spec.to_json())
    assert main(["synth", "--spec", str(root / "spec.json"), "--out", str(root / "seq")]) == 0
    return root


def test_cli_track_is_byte_reproducible(seq_dir, tmp_path):
    gt = (seq_dir / "seq" / "groundtruth.txt").read_text().splitlines()[0]
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("seed=4\n")
    for name in ("a.txt", "b.txt"):
        assert main(["track", "--seq", str(seq_dir / "seq"), "--init", gt, "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert len(read_annotations(tmp_path / "a.txt")) == 12


def test_cli_track_overlay_and_eval(seq_dir, tmp_path, capsys):
    gt = (seq_dir / "seq" / "groundtruth.txt").read_text().splitlines()[0]
    out = tmp_path / "r.txt"
    assert main(["track", "--seq", str(seq_dir / "seq"), "--init", gt, "--out", str(out), "--overlay", str(tmp_path / "ov")]) == 0
    assert len(list((tmp_path / "ov").glob("*.ppm"))) == 12
    capsys.readouterr()
    assert main(["eval", "--pred", str(out), "--gt", str(seq_dir / "seq" / "groundtruth.txt"), "--json"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert set(res) == {"precision", "success_auc", "per_frame_iou", "fps"}
    assert len(res["per_frame_iou"]) == 11


def test_cli_errors(tmp_path, capsys):
    (tmp_path / "p.txt").write_text("1,2,3,4\n")
    (tmp_path / "g.txt").write_text("1,2,3\n")
    assert main(["eval", "--pred", str(tmp_path / "p.txt"), "--gt", str(tmp_path / "g.txt")]) == 2
    assert "line 1" in capsys.readouterr().err
    assert main(["ablate", "--arms", "cascaded,bogus"]) == 2
    with pytest.raises(SystemExit):
        main(["track", "--seq", "x", "--init", "1,2,3", "--out", "y"])


def test_cli_ablate_json(capsys):
    assert main(["ablate", "--arms", "cascaded,parallel", "--tier", "sim0.5", "--sequences", "1", "--frames", "5", "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["tier"] == "sim0.5" and "cascaded>=parallel" in out["comparisons"]


def test_cli_oracle_passes(capsys):
    assert main(["oracle"]) == 0
    assert "all oracles passed" in capsys.readouterr().out
