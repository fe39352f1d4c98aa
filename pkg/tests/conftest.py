"""Session fixtures: one shared synthetic training run feeds several tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from ovrseg import cli
from ovrseg.data import SyntheticSpec, generate_synthetic
from ovrseg.evaluation import parse_kv_report

OVERFIT_MODEL = dict(
    feat_dim=32,
    vl_embed_dim=32,
    vl_patch_size=8,
    guidance_patch_sizes=[4, 8, 8],
    guidance_dims=[16, 24, 32],
    window_size=4,
    num_heads=4,
    mlp_ratio=2.0,
    refine_depth=2,
)

OVERFIT_TRAIN = dict(lr_other=1.0e-3, batch_size=4, max_iters=250, checkpoint_interval=250)


@dataclass
class TrainedArtifact:
    data_dir: str
    manifest_path: str
    out_dir: str
    config_path: str
    checkpoint_path: str
    log_path: str
    report_kv_path: str
    train_miou: float
    train_seconds: float
    heatmaps: dict[str, np.ndarray] = field(default_factory=dict)


@pytest.fixture(scope="session")
def trained_artifact(tmp_path_factory) -> TrainedArtifact:
    """Train the synthetic overfit case once through the CLI and cache results."""
    base = tmp_path_factory.mktemp("trained")
    data_dir = base / "data"
    out_dir = base / "run"
    spec = SyntheticSpec(seed=0, image_px=64, n_classes=4, n_images=8,
                         shapes_per_image=3, noise=0.03)
    manifest_path = generate_synthetic(spec, str(data_dir))
    config = {
        "manifest": manifest_path,
        "output_dir": str(out_dir),
        "seed": 0,
        "model": OVERFIT_MODEL,
        "train": OVERFIT_TRAIN,
    }
    config_path = base / "overfit.yaml"
    config_path.write_text(yaml.safe_dump(config))

    start = time.monotonic()
    assert cli.main(["train", str(config_path)]) == 0
    train_seconds = time.monotonic() - start

    checkpoint = out_dir / "checkpoint.ckpt"
    assert cli.main(["eval", str(checkpoint), manifest_path,
                     "--phase", "train", "--out-dir", str(out_dir)]) == 0
    report = parse_kv_report((out_dir / "report_train.kv").read_text())
    assert report.s_miou is not None

    heatmaps = {}
    sample_image = str(data_dir / "images" / "0000.png")
    for cls in ("red block", "green block"):
        out_png = out_dir / f"heat_{cls.split()[0]}.png"
        assert cli.main(["viz-corr", str(checkpoint), sample_image, cls,
                         str(out_png), "--manifest", manifest_path]) == 0
        with Image.open(out_png) as im:
            heatmaps[cls] = np.asarray(im.convert("RGB"))

    return TrainedArtifact(
        data_dir=str(data_dir),
        manifest_path=manifest_path,
        out_dir=str(out_dir),
        config_path=str(config_path),
        checkpoint_path=str(checkpoint),
        log_path=str(out_dir / "loss_log.csv"),
        report_kv_path=str(out_dir / "report_train.kv"),
        train_miou=float(report.s_miou),
        train_seconds=train_seconds,
        heatmaps=heatmaps,
    )


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(1234)
