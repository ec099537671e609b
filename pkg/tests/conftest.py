import numpy as np
import pytest

from cosmoseg import dataio
from cosmoseg.phantom import PhantomConfig, generate_phantom, sparsify_annotations


def mini_phantom_config(seed: int = 0, **overrides) -> PhantomConfig:
    """Small, fast phantom used by unit tests (acceptance uses desk scale)."""
    params = dict(
        shape=(32, 64, 64),
        z_margin=3,
        centerline_amplitude=2.0,
        lumen_radius_range=(2.0, 3.0),
        wall_thickness_range=(1.5, 2.0),
        plaque_count=1,
        plaque_span_range=(4, 6),
        plaque_boost_range=(1.0, 1.5),
        seed=seed,
    )
    params.update(overrides)
    return PhantomConfig(**params)


def build_dataset(root, n=4, seed=0, annotated_fraction=0.3, config_factory=mini_phantom_config):
    """Write n phantom cases plus catalog under root; returns the catalog path."""
    for sub in ("images", "annotations", "truth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        cfg = config_factory(seed=seed + i, annotated_fraction=annotated_fraction)
        image, dense = generate_phantom(cfg)
        annotations = sparsify_annotations(dense, cfg.annotated_fraction)
        dataio.save_volume(image, root / "images" / f"{image.case_id}.nii.gz")
        dataio.save_volume(dense, root / "truth" / f"{image.case_id}.nii.gz")
        dataio.save_annotations(annotations, root / "annotations" / f"{image.case_id}.json")
        records.append(
            dataio.CaseRecord(
                case_id=image.case_id,
                image_path=f"images/{image.case_id}.nii.gz",
                annotation_path=f"annotations/{image.case_id}.json",
                gt_path=f"truth/{image.case_id}.nii.gz",
            )
        )
    folds = dataio.assign_folds([r.case_id for r in records], k=min(4, n), seed=seed)
    for r in records:
        r.fold_id = folds[r.case_id]
    catalog = root / "catalog.csv"
    dataio.save_catalog(records, catalog)
    return catalog


@pytest.fixture(scope="session")
def mini_phantom():
    """One deterministic small phantom: (image, dense labels, annotations)."""
    cfg = mini_phantom_config(seed=3)
    image, dense = generate_phantom(cfg)
    annotations = sparsify_annotations(dense, cfg.annotated_fraction)
    return image, dense, annotations


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
