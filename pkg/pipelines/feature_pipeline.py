import json
import logging
from typing import List

import numpy as np

from pipelines.context import StageContext
from src.channel import (
    channel_matrix,
    dump_scene_json,
    generate_scene,
    normalize_channels,
    perturb_to_twin,
    save_scene,
)
from src.data_utils import Origin, build_dataset, save_dataset

logger = logging.getLogger(__name__)

SCENES = ["scene_real.btsc", "scene_twin.btsc"]
DATASETS = ["twin.btds", "real.btds", "background.btds", "twin_narrow.btds", "real_narrow.btds"]
CHANNELS = ["channels_real.npy", "channel_scale.json"]
OUTPUTS = SCENES + ["scene_real.json", "scene_twin.json", "odft_codebook.csv"] + CHANNELS + DATASETS


def run_generate(ctx: StageContext) -> List[str]:
    """
    Real scene, its digital twin, and every dataset the later stages train on.

    Sensing datasets hold RSSI of the DFT sensing beams; the ``*_narrow``
    datasets hold RSSI of every narrow O-DFT beam (fixed-subset baseline).
    Real and background rows are standardized with the twin's statistics.
    """
    cfg, store = ctx.cfg, ctx.store.ensure()
    array = ctx.array()
    mc = ctx.measurement()
    sensing, candidates = ctx.sensing(), ctx.candidates()

    # Step 1: Generate the real site and its twin
    logger.info("Step 1: Generating the real scene and its digital twin...")
    real_scene = generate_scene(
        cfg.scene.n_ue, array, ctx.seed("scene"), cfg.scene.los_fraction, ctx.geometry()
    )
    twin_scene = perturb_to_twin(real_scene, ctx.twin_perturbation(), ctx.seed("twin"))
    save_scene(real_scene, store.path("scene_real.btsc"))
    save_scene(twin_scene, store.path("scene_twin.btsc"))
    dump_scene_json(real_scene, store.path("scene_real.json"))
    dump_scene_json(twin_scene, store.path("scene_twin.json"))
    candidates.to_csv(store.path("odft_codebook.csv"))

    # stored channels peak at 1; channel_scale.json restores physical units
    normalized, scale = normalize_channels(channel_matrix(real_scene, array))
    np.save(store.path("channels_real.npy"), normalized)
    store.path("channel_scale.json").write_text(json.dumps({"real": scale}, sort_keys=True) + "\n")
    logger.info(f"Real-site channels: {normalized.shape[0]} UEs, peak |h| = {scale:.3e}")

    # Step 2: Sensing-beam datasets
    logger.info("Step 2: Building sensing-beam datasets...")
    ds_cfg = cfg.dataset
    common = dict(cfg=array, split_fractions=ds_cfg.split_fractions)
    twin = build_dataset(
        twin_scene, sensing, candidates, mc, ds_cfg.n_twin, Origin.TWIN, ctx.seed("noise:twin"), **common
    )
    real = build_dataset(
        real_scene, sensing, candidates, mc, ds_cfg.n_real, Origin.REAL, ctx.seed("noise:real"),
        reference=twin, **common,
    )
    background = build_dataset(
        twin_scene, sensing, candidates, mc, ds_cfg.n_background, Origin.TWIN,
        ctx.seed("noise:background"), reference=twin, **common,
    )

    # Step 3: Narrow-beam datasets for the fixed-subset baseline (same rows and noise seeds)
    logger.info("Step 3: Building narrow-beam datasets...")
    twin_narrow = build_dataset(
        twin_scene, candidates, candidates, mc, ds_cfg.n_twin, Origin.TWIN, ctx.seed("noise:twin"), **common
    )
    real_narrow = build_dataset(
        real_scene, candidates, candidates, mc, ds_cfg.n_real, Origin.REAL, ctx.seed("noise:real"),
        reference=twin_narrow, **common,
    )

    for name, ds in zip(DATASETS, [twin, real, background, twin_narrow, real_narrow]):
        save_dataset(ds, store.path(name))
        logger.info(f"Saved {name}: {ds.n_rows} rows x {ds.n_features} features")
    return OUTPUTS


if __name__ == "__main__":
    from pipelines.cli import main

    raise SystemExit(main(["generate"]))
