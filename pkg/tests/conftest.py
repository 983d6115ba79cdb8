import numpy as np
import pytest
import torch

from neurss.simulator import SurveyPlan, Terrain, TerrainFeature, generate_survey
from neurss.surface import SirenSurface

torch.set_default_dtype(torch.float64)


def small_terrain(seed: int = 0, base: float = -12.0, n_features: int = 3,
                  extent: float = 60.0) -> Terrain:
    """Random smooth terrain with a few bumps inside the given extent."""
    rng = np.random.default_rng(seed)
    feats = [TerrainFeature(float(rng.uniform(-2.0, 2.0)),
                            (float(rng.uniform(0, 0.8 * extent)),
                             float(rng.uniform(0, 0.5 * extent))),
                            float(rng.uniform(5.0, 10.0)),
                            float(rng.uniform(5.0, 10.0)))
             for _ in range(n_features)]
    return Terrain(base, feats, domain_half_extent=extent)


def tiny_siren(seed: int = 0, hidden: int = 16, n_layers: int = 3,
               extent: float = 40.0) -> SirenSurface:
    torch.manual_seed(seed)
    net = SirenSurface(n_layers=n_layers, hidden=hidden)
    net.set_domain((-extent, extent), (-extent, extent), (-30.0, 10.0))
    return net


@pytest.fixture(scope="session")
def mini_survey():
    """Small but complete survey shared by the slower integration tests."""
    terrain = Terrain(-10.0, [TerrainFeature(1.5, (20.0, 10.0), 6.0, 6.0),
                              TerrainFeature(-1.0, (40.0, 18.0), 7.0, 5.0)],
                      domain_half_extent=50.0)
    plan = SurveyPlan(line_spacing=10, line_length=60, n_lines=3,
                      slant_range_max=18, n_bins=32, altitude=7,
                      n_landmarks=40, submap_size=15, seed=7)
    return generate_survey(terrain, plan)
