import json

import numpy as np

from ufr.cli import main
from ufr.localaug import AugmentationPlan, with_alpha
from ufr.raster import load_image, load_objects
from ufr.spectral import global_transform


def run(*argv):
    return main([str(a) for a in argv])


def test_augment_writes_scene_and_plan(tmp_path):
    assert run("augment", "--seed", 1, "--out-dir", tmp_path) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"original.ppm", "augmented.ppm", "boxes.txt", "plan.txt", "mask_0.pgm"} <= names
    out = load_image(tmp_path / "augmented.ppm")
    assert out.shape == (64, 64, 3)


def test_augment_replay_from_files_is_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run("augment", "--seed", 2, "--out-dir", a)
    masks = sorted(a.glob("mask_*.pgm"))
    run("augment", "--out-dir", b, "--image", a / "original.ppm", "--boxes", a / "boxes.txt",
        "--masks", *masks, "--plan-in", a / "plan.txt")
    assert (a / "augmented.ppm").read_bytes() == (b / "augmented.ppm").read_bytes()


def test_alpha_one_plan_reproduces_global_transform(tmp_path):
    run("augment", "--seed", 3, "--out-dir", tmp_path)
    plan = with_alpha(AugmentationPlan.from_text((tmp_path / "plan.txt").read_text()), 1.0)
    (tmp_path / "alpha1.txt").write_text(plan.to_text())
    masks = sorted(tmp_path.glob("mask_*.pgm"))
    run("augment", "--out-dir", tmp_path / "g", "--image", tmp_path / "original.ppm",
        "--boxes", tmp_path / "boxes.txt", "--masks", *masks, "--plan-in", tmp_path / "alpha1.txt")
    x = load_image(tmp_path / "original.ppm")
    expected = global_transform(x, plan.r, plan.noise_seed)
    got = load_image(tmp_path / "g" / "augmented.ppm")
    assert np.max(np.abs(got - expected)) <= 0.5 / 255 + 1e-12


def test_augment_fuzz_range(tmp_path):
    for seed in range(100):
        d = tmp_path / str(seed)
        run("augment", "--seed", seed, "--set", "size=16", "--out-dir", d)
        x = load_image(d / "augmented.ppm")
        assert x.min() >= 0 and x.max() <= 1
        objs = load_objects(d / "boxes.txt", sorted(d.glob("mask_*.pgm")))
        assert len(objs) >= 1


def test_config_file_and_bad_key(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("size = 24\n")
    run("augment", "--config", tmp_path / "c.txt", "--out-dir", tmp_path / "o")
    assert load_image(tmp_path / "o" / "original.ppm").shape == (24, 24, 3)
    assert run("augment", "--set", "nope=1", "--out-dir", tmp_path) == 2


def test_train_zero_steps_and_diagnose(tmp_path):
    t = tmp_path / "t"
    common = ["--set", "steps=0", "--set", "size=16", "--set", "n_eval=2", "--set", "n_scenes=2"]
    assert run("train", *common, "--out-dir", t) == 0
    report = json.loads((t / "metrics.json").read_text())
    assert report["steps"] == [] and set(report["final"]) >= {"d_c", "dice_hard", "accuracy"}
    assert (t / "attention_0_domain0.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")
    d = tmp_path / "d"
    assert run("diagnose", "--set", "size=16", "--set", "n_eval=2", "--checkpoint", t / "model.ckpt",
               "--compare", t / "model.ckpt", "--registry", t / "registry_original.json",
               t / "registry_original.json", "--out-dir", d) == 0
    diag = json.loads((d / "diagnose.json").read_text())
    assert diag["feature_l1"] == 0.0


def test_diagnose_hand_built_registries(tmp_path):
    for k, v in enumerate([0.0, 1.0, 2.0, 3.0, 4.0]):
        (tmp_path / f"r{k}.json").write_text(json.dumps({"0": {"mean": [v], "count": 1}}))
    regs = sorted(tmp_path.glob("r*.json"))
    run("diagnose", "--registry", *regs, "--out-dir", tmp_path / "d")
    diag = json.loads((tmp_path / "d" / "diagnose.json").read_text())
    assert abs(diag["registry_d_c"]["0"] - 1.2) <= 1e-12
    run("diagnose", "--registry", regs[0], regs[0], "--out-dir", tmp_path / "z")
    assert json.loads((tmp_path / "z" / "diagnose.json").read_text())["registry_d_c"]["0"] == 0.0


def test_train_short_run_is_deterministic(tmp_path):
    args = ["--set", "steps=5", "--set", "size=16", "--set", "n_eval=2", "--set", "n_scenes=2"]
    run("train", *args, "--out-dir", tmp_path / "a")
    run("train", *args, "--out-dir", tmp_path / "b")
    for name in ("metrics.json", "model.ckpt", "registry_original.json", "attention_0_domain1.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    steps = json.loads((tmp_path / "a" / "metrics.json").read_text())["steps"]
    for s in steps:
        assert abs(s["total"] - (s["L_sup"] + 0.1 * s["L_att"] + 0.1 * (s["L_exp"] + s["L_imp"]))) <= 1e-9
