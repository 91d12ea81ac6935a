"""Synthetic corporate panel generator with plantable migration signal.

Each company carries a latent credit-quality level measured in notches
(higher is worse). The level follows a slow random walk with a mild
worsening drift and occasional adverse shocks, which reproduces the
roughly two-to-one downgrade/upgrade imbalance seen in real rating
histories. The published rating tracks the latent level with hysteresis,
so most quarters are unchanged.

Features come in three kinds, drawn once per seed:

* leading features follow the latent level 2 to 4 quarters ahead, which
  plants an early-warning signal into the panel;
* level features follow the current latent level, giving the strong
  rating-group separation visible in real balance-sheet data;
* noise features carry no signal at all.

All features add autoregressive observation noise, and a small fraction of
cells is blanked to exercise missing-value handling. A few companies end
their history unrated (NR) and heavy downward excursions can reach B or D
territory, exercising the rating filter.
"""

from __future__ import annotations

from datetime import date

import numpy as np

from .data import PanelRow, add_months
from .ratings import FULL_SCALE

N_FEATURES = 70
_N_LEADING = 24
_N_LEVEL = 30

# Initial rating mix, indices 2 (AA) through 11 (BB): concentrated between
# A+ and BBB- like the real panel.
_START_INDICES = np.arange(2, 12)
_START_WEIGHTS = np.array([0.02, 0.05, 0.10, 0.13, 0.15, 0.17, 0.18, 0.10, 0.06, 0.04])

_DRIFT = 0.007            # notches per quarter, toward worse credit
_SIGMA_RANGE = (0.10, 0.24)
_SHOCK_PROB = 0.012
_SHOCK_RANGE = (0.6, 1.8)
_HYSTERESIS = 0.8
_AR_COEF = 0.6
_NOISE_SD_RANGE = (0.5, 1.1)
_LEAD_ATTENUATION = 1.0
_LEAD_NOISE_BOOST = 1.0
_MAX_LEAD = 4
_BEST_BOUND = -0.45       # reflecting bound just above AAA
_DEFAULT_INDEX = 16       # D is absorbing


def generate_synthetic(
    n_companies: int,
    n_quarters: int,
    seed: int,
    start_date: date = date(1997, 1, 1),
    missing_rate: float = 0.015,
) -> list[PanelRow]:
    """Generate a deterministic panel of `n_companies` x `n_quarters` rows.

    The same seed always produces the identical row list. Companies mostly
    span the whole window; about one in seven starts late, thinning early
    years the way entry into rating coverage does.
    """
    if n_companies < 1:
        raise ValueError("n_companies must be >= 1")
    if n_quarters < 8:
        raise ValueError("n_quarters must be >= 8")
    rng = np.random.default_rng(seed)

    kinds = np.array(
        ["lead"] * _N_LEADING + ["level"] * _N_LEVEL + ["noise"] * (N_FEATURES - _N_LEADING - _N_LEVEL)
    )
    loading = rng.uniform(0.5, 1.5, size=N_FEATURES) * rng.choice((-1.0, 1.0), size=N_FEATURES)
    loading[kinds == "noise"] = 0.0
    # The early-warning signal is spread thinly: each leading feature is
    # individually weak and noisy, so finding it needs many features at once.
    loading[kinds == "lead"] *= _LEAD_ATTENUATION
    lead = np.zeros(N_FEATURES, dtype=np.int64)
    lead[kinds == "lead"] = rng.integers(2, _MAX_LEAD + 1, size=_N_LEADING)
    offset_term = rng.uniform(-2.0, 2.0, size=N_FEATURES)
    noise_sd = rng.uniform(*_NOISE_SD_RANGE, size=N_FEATURES)
    noise_sd[kinds == "lead"] *= _LEAD_NOISE_BOOST

    rows: list[PanelRow] = []
    for c in range(n_companies):
        company = f"C{c + 1:04d}"
        late = rng.random() < 0.15
        start_offset = int(rng.integers(1, 9)) if late else 0
        length = n_quarters - start_offset
        goes_private = rng.random() < 0.02
        nr_tail = int(rng.integers(1, 4)) if goes_private else 0

        sim_len = length + _MAX_LEAD
        latent = np.empty(sim_len)
        latent[0] = rng.choice(_START_INDICES, p=_START_WEIGHTS) + rng.uniform(-0.3, 0.3)
        sigma = rng.uniform(*_SIGMA_RANGE)
        steps = _DRIFT + sigma * rng.standard_normal(sim_len - 1)
        shocks = (rng.random(sim_len - 1) < _SHOCK_PROB) * rng.uniform(
            *_SHOCK_RANGE, size=sim_len - 1
        )
        for t in range(1, sim_len):
            latent[t] = max(latent[t - 1] + steps[t - 1] + shocks[t - 1], _BEST_BOUND)

        rating_idx = np.empty(length, dtype=np.int64)
        level = int(np.clip(round(latent[0]), 0, _DEFAULT_INDEX))
        for t in range(length):
            if level != _DEFAULT_INDEX and abs(latent[t] - level) >= _HYSTERESIS:
                level = int(np.clip(round(latent[t]), 0, _DEFAULT_INDEX))
            rating_idx[t] = level

        signal = np.empty((length, N_FEATURES))
        t_grid = np.arange(length)
        for j in range(N_FEATURES):
            src = latent[np.minimum(t_grid + lead[j], sim_len - 1)]
            signal[:, j] = loading[j] * (src - 7.0) + offset_term[j]
        noise = np.empty((length, N_FEATURES))
        innov = rng.standard_normal((length, N_FEATURES)) * (
            noise_sd * np.sqrt(1.0 - _AR_COEF ** 2)
        )
        noise[0] = rng.standard_normal(N_FEATURES) * noise_sd
        for t in range(1, length):
            noise[t] = _AR_COEF * noise[t - 1] + innov[t]
        values = np.round(signal + noise, 6)
        missing = rng.random((length, N_FEATURES)) < missing_rate

        for t in range(length):
            sym = "NR" if t >= length - nr_tail else FULL_SCALE[rating_idx[t]]
            feats = tuple(
                None if missing[t, j] else float(values[t, j]) for j in range(N_FEATURES)
            )
            rows.append(
                PanelRow(
                    company_id=company,
                    as_of_date=add_months(start_date, 3 * (start_offset + t)),
                    rating=sym,
                    features=feats,
                )
            )
    return rows
