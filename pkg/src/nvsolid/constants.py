"""Physical constants (SI) and protocol defaults shared across modules."""

import numpy as np
from scipy import constants as _c

MU0 = _c.mu_0
PLANCK = _c.h
BOLTZMANN = _c.k

# Gyromagnetic ratios as ordinary frequency per tesla (Hz/T).
GAMMA_PROTON = _c.physical_constants["proton gyromag. ratio in MHz/T"][0] * 1e6
GAMMA_ELECTRON = _c.physical_constants["electron gyromag. ratio in MHz/T"][0] * 1e6
GAMMA_N15 = 4.316e6

MAGIC_ANGLE = float(np.arccos(1.0 / np.sqrt(3.0)))

# Reference anchor for the dipolar convention: the largest secular coupling of
# two protons 0.25 nm apart is 14.9 kHz.
DIPOLAR_ANCHOR_HZ = 14.9e3
DIPOLAR_ANCHOR_DISTANCE = 0.25e-9
