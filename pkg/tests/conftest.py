import csv

import numpy as np
import pytest

from freewaytt.estimation import SPMD_COLUMNS
from freewaytt.geodata import Segment
from freewaytt.synth import CongestionProfile, demo_segments, generate_matrix


def write_bsm(path, rows, columns=SPMD_COLUMNS):
    """rows: tuples in the order of ``columns``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)
    return path


@pytest.fixture
def east_segment():
    return Segment("E1", ((42.0, -83.0), (42.0, -82.99), (42.0, -82.98)), "EB")


@pytest.fixture
def corridor():
    return demo_segments(3, 0.8, bearing_deg=135.0)


@pytest.fixture(scope="session")
def ar_matrix():
    segs = demo_segments(3, 0.8, bearing_deg=135.0)
    profile = CongestionProfile(noise_sd=0.08, ar_coef=0.9, seed=11)
    return generate_matrix(profile, segs, 10)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
