import json

import pytest
import torch

from latentuda import training
from latentuda.checkpoint import CheckpointError, load_model, read_checkpoint, save_checkpoint
from latentuda.data import DomainDataset, SplitSpec, SyntheticShiftConfig, generate_synthetic_shift, split_dataset
from latentuda.segnet import SegConfig, UNet, parameter_digest
from latentuda.training import (
    EvalCell,
    EvalReport,
    Models,
    RunConfig,
    TrainingDiverged,
    evaluate,
    train_baseline,
    train_uda,
)
from latentuda.vae import VaeConfig

SEG = SegConfig(input_size=(16, 16), desk_widths=[4, 8, 16])
VAE_CFG = VaeConfig(latent_dim=4, encoder_channels=[4, 8], decoder_channels=[8, 4], input_size=(16, 16))


@pytest.fixture(scope="module")
def tiny():
    src, tgt = generate_synthetic_shift(SyntheticShiftConfig(n_images=10, image_size=(16, 16), seed=1))
    train, val = split_dataset(src, SplitSpec(0.8, 0.25, 0))
    return train, val, tgt


def _run(**kw):
    base = dict(epochs=2, batch_size=4, eval_batch_size=8)
    base.update(kw)
    return RunConfig(**base)


def test_stage_epochs():
    assert RunConfig(epochs=100).stage_epochs() == (40, 30, 30)
    assert RunConfig(epochs=30).stage_epochs() == (12, 9, 9)
    assert RunConfig(epochs=1, stage_fractions=(1, 0, 0)).stage_epochs() == (1, 0, 0)
    assert sum(RunConfig(epochs=7).stage_epochs()) == 7


def test_run_config_errors():
    for kw in ({"epochs": 0}, {"batch_size": 0}, {"optimizer": "adam"}, {"stage_fractions": (0, 0, 0)}):
        with pytest.raises(ValueError):
            RunConfig(**kw)


def test_one_step_per_epoch_with_full_batch(tiny):
    train, val, _ = tiny
    _, hist = train_baseline(train, val, _run(epochs=1, batch_size=len(train)), SEG)
    assert [e["steps"] for e in hist["epochs"]] == [1]


def test_baseline_is_deterministic(tiny, tmp_path):
    train, val, _ = tiny
    a, ha = train_baseline(train, val, _run(), SEG, tmp_path / "a")
    b, hb = train_baseline(train, val, _run(), SEG, tmp_path / "b")
    assert ha == hb
    assert parameter_digest(a) == parameter_digest(b)
    assert (tmp_path / "a" / "baseline_best.pt").is_file()
    assert (tmp_path / "a" / "baseline_last.pt").is_file()


def test_baseline_needs_masks(tiny):
    train, val, _ = tiny
    bare = DomainDataset("x", "source", tuple(type(it)(it.id, it.image, None) for it in train.items), train.image_size)
    with pytest.raises(training.DatasetError):
        train_baseline(bare, val, _run(), SEG)


def test_baseline_resume_matches_uninterrupted(tiny, tmp_path, monkeypatch):
    train, val, _ = tiny
    full, hist_full = train_baseline(train, val, _run(epochs=3), SEG, tmp_path / "full")

    real = training.mean_dsc
    calls = {"n": 0}

    def crash_on_second(*a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            raise KeyboardInterrupt
        return real(*a, **k)

    monkeypatch.setattr(training, "mean_dsc", crash_on_second)
    with pytest.raises(KeyboardInterrupt):
        train_baseline(train, val, _run(epochs=3), SEG, tmp_path / "cut")
    monkeypatch.setattr(training, "mean_dsc", real)
    state = torch.load(tmp_path / "cut" / "baseline_resume.pt", weights_only=False)
    assert state["state"]["epoch"] == 1
    resumed, hist = train_baseline(train, val, _run(epochs=3), SEG, tmp_path / "cut", resume=True)
    assert [e["epoch"] for e in hist["epochs"]] == [0, 1, 2]
    assert hist == hist_full
    assert parameter_digest(resumed) == parameter_digest(full)


def test_resume_without_state_fails(tiny, tmp_path):
    train, val, _ = tiny
    with pytest.raises(FileNotFoundError):
        train_baseline(train, val, _run(), SEG, tmp_path, resume=True)


def test_uda_schedule_and_frozen_stage(tiny, tmp_path):
    train, val, _ = tiny
    cfg = _run(epochs=6, loss_weights=(1.0, 1e-4, 1e-3))
    vae, seg, hist = train_uda(train, val, cfg, VAE_CFG, SEG, tmp_path)
    assert hist["stage_epochs"] == [2, 2, 2]
    assert [e["stage"] for e in hist["epochs"]] == ["A", "A", "B", "B", "C", "C"]
    assert hist["stage_b_vae_frozen"] is True
    assert hist["stage_a_val_reconstruction"] == min(e["val_reconstruction"] for e in hist["epochs"][:2])
    c = hist["epochs"][-1]
    assert {"reconstruction", "kl", "perceptual", "vae_total", "seg_total", "dice", "bce"} <= set(c)
    for name in ("uda_vae_best.pt", "uda_seg_best.pt", "uda_vae_last.pt", "uda_seg_last.pt"):
        assert (tmp_path / name).is_file()
    best_seg, blob = load_model(tmp_path / "uda_seg_best.pt", "seg")
    assert parameter_digest(best_seg) == parameter_digest(seg)
    assert blob["extra"]["val_dsc"] == hist["best_val_dsc"]


def test_uda_resume_matches_uninterrupted(tiny, tmp_path, monkeypatch):
    train, val, _ = tiny
    cfg = _run(epochs=6, loss_weights=(1.0, 1e-4, 1e-3))
    vae_a, seg_a, ha = train_uda(train, val, cfg, VAE_CFG, SEG, tmp_path / "full")
    real = training.mean_dsc
    calls = {"n": 0}

    def crash_in_stage_c(*a, **k):
        calls["n"] += 1
        if calls["n"] == 4:  # B, B, C, then the second C epoch
            raise KeyboardInterrupt
        return real(*a, **k)

    monkeypatch.setattr(training, "mean_dsc", crash_in_stage_c)
    with pytest.raises(KeyboardInterrupt):
        train_uda(train, val, cfg, VAE_CFG, SEG, tmp_path / "cut")
    monkeypatch.setattr(training, "mean_dsc", real)
    vae_b, seg_b, hb = train_uda(train, val, cfg, VAE_CFG, SEG, tmp_path / "cut", resume=True)
    assert ha == hb
    assert parameter_digest(vae_a) == parameter_digest(vae_b)
    assert parameter_digest(seg_a) == parameter_digest(seg_b)


def test_divergence_aborts_with_checkpoint(tiny, tmp_path, monkeypatch):
    train, val, _ = tiny
    real = training.segmentation_loss
    calls = {"n": 0}

    def poisoned(pred, truth, *a, **k):
        calls["n"] += 1
        total, dice, bce = real(pred, truth, *a, **k)
        if calls["n"] > 3:
            total = total * float("nan")
        return total, dice, bce

    monkeypatch.setattr(training, "segmentation_loss", poisoned)
    with pytest.raises(TrainingDiverged) as info:
        train_baseline(train, val, _run(epochs=3), SEG, tmp_path)
    assert info.value.checkpoint == tmp_path / "baseline_best.pt"
    assert info.value.checkpoint.is_file()


def test_checkpoint_round_trip_and_errors(tmp_path):
    torch.manual_seed(0)
    net = UNet(SEG)
    p = save_checkpoint(tmp_path / "m.pt", "seg", net, epoch=4, seed=9, extra={"k": 1})
    again, blob = load_model(p, "seg")
    assert parameter_digest(again) == parameter_digest(net)
    assert blob["epoch"] == 4 and blob["seed"] == 9 and not again.training
    with pytest.raises(CheckpointError, match="expected 'vae'"):
        read_checkpoint(p, "vae")
    with pytest.raises(CheckpointError, match="not found"):
        read_checkpoint(tmp_path / "none.pt")
    (tmp_path / "junk.pt").write_bytes(b"junk")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError, match="not a"):
        read_checkpoint(tmp_path / "other.pt")


def _cell(**kw):
    base = dict(method="uda", direction="WLI->NBI", protocol="separated", iou=0.5, dsc=0.6, n_images=3, seed=0)
    base.update(kw)
    return EvalCell(**base)


def test_report_invariants():
    rep = EvalReport()
    rep.add(_cell())
    with pytest.raises(ValueError, match="duplicate"):
        rep.add(_cell())
    with pytest.raises(ValueError, match="DSC < IoU"):
        rep.add(_cell(protocol="mixed", iou=0.7, dsc=0.6))
    with pytest.raises(ValueError, match="range"):
        rep.add(_cell(protocol="mixed", iou=-0.1, dsc=0.6))


def test_report_exports(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    rep = EvalReport()
    for m in ("baseline-unet", "uda"):
        for p in ("separated", "mixed"):
            rep.add(_cell(method=m, protocol=p))
    assert rep.cells[0].timestamp == 1700000000.0
    paths = rep.save(tmp_path)
    back = EvalReport.from_dict(json.loads(paths["json"].read_text()))
    assert back.canonical_json() == rep.canonical_json()
    assert paths["csv"].read_text().count("\n") == 5
    table = paths["txt"].read_text()
    assert "baseline-unet" in table and "uda" in table and "mixed" in table and "separated" in table


def test_evaluate_oracle_and_errors(tiny):
    _, _, tgt = tiny
    cfg = _run()
    cell, _ = evaluate("oracle", "WLI->NBI", "separated", Models(), tgt, cfg)
    assert cell.iou == cell.dsc == 1.0
    with pytest.raises(ValueError, match="protocol"):
        evaluate("oracle", "WLI->NBI", "both", Models(), tgt, cfg)
    bare = DomainDataset("NBI", "target", tuple(type(it)(it.id, it.image, None) for it in tgt.items), tgt.image_size)
    with pytest.raises(training.DatasetError):
        evaluate("oracle", "WLI->NBI", "separated", Models(), bare, cfg)


def test_evaluate_methods(tiny):
    train, val, tgt = tiny
    torch.manual_seed(0)
    models = Models(UNet(SEG).eval(), *(m.eval() for m in (training.VAE(VAE_CFG), UNet(SEG))))
    rep = EvalReport()
    from latentuda.inference import LatentSearchConfig

    for m in ("baseline-unet", "uda"):
        cell, preds = evaluate(m, "WLI->NBI", "separated", models, tgt, _run(), LatentSearchConfig(max_iterations=3),
                               report=rep)
        assert cell.n_images == len(tgt) and cell.dsc >= cell.iou
        assert preds.masks.shape == (len(tgt), 1, 16, 16)
    assert len(rep.cells) == 2
