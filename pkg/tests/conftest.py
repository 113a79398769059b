import math

import numpy as np
import pytest

from nasalbio.geometry import crop_nose, estimate_tip, median_filter, resample_to_grid
from nasalbio.landmarks import detect_root_initial
from nasalbio.synthetic import SyntheticNoseSpec, generate_synthetic


def prepared_nose(seed=0, roll=0.0, noise=0.0, filt=1, **kw):
    """Synthetic face taken through resampling, filtering and cropping."""
    cloud, truth = generate_synthetic(SyntheticNoseSpec(subject_seed=seed, roll=roll,
                                                        noise_sigma=noise, **kw))
    g = resample_to_grid(cloud, 0.5)
    for _ in range(filt):
        g = median_filter(g)
    tip0 = estimate_tip(g)
    root0 = detect_root_initial(g, tip0)
    return crop_nose(g, tip0, root0[1]), truth, tip0, root0


@pytest.fixture(scope="session")
def nose0():
    return prepared_nose(0)


@pytest.fixture(scope="session")
def symmetric_nose():
    """A face with no identity bumps, so it is mirror symmetric about x = 0."""
    from nasalbio.synthetic import NoseShape
    return prepared_nose(0, shape=NoseShape())


@pytest.fixture(scope="session")
def rolled_nose():
    # noise free and unfiltered: the median filter alone moves the tip peak 0.5-1 mm
    return prepared_nose(0, roll=math.radians(5.0), filt=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mirror_grid():
    """Analytic face sampled on a lattice symmetric about x = 0, plus its truth."""
    from nasalbio.geometry import DepthGrid
    from nasalbio.synthetic import NoseShape, SyntheticFace
    face = SyntheticFace(NoseShape())
    x = np.arange(-80, 81) * 0.5
    y = np.arange(-80, 121) * 0.5
    X, Y = np.meshgrid(x, y)
    g = DepthGrid(x, y, face.surface(X, Y), np.ones(X.shape, bool))
    tip0 = estimate_tip(g)
    root0 = detect_root_initial(g, tip0)
    return crop_nose(g, tip0, root0[1]), face.landmarks(), tip0, root0
