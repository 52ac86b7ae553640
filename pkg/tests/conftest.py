import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tfsense import scenarios, signals
from tfsense.frontend import FrontendConfig, TFPlot, fft_rows

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


def plots_from(samples: np.ndarray, fe: FrontendConfig) -> list[TFPlot]:
    """Cut a sample stream into whole TF plots (offline, no buffer)."""
    per = fe.n_fft * fe.plot_height
    out = []
    for w in range(samples.size // per):
        block = samples[w * per:(w + 1) * per].reshape(fe.plot_height, fe.n_fft)
        out.append(TFPlot(fft_rows(block), w * fe.plot_height, fe))
    return out


def scenario_plots(name: str, plot_height: int = 500, n_plots: int = 1, seed: int = 0,
                   snr_db: float | None = None):
    sc = scenarios.build(name, plot_height=plot_height, n_plots=n_plots, seed=seed, snr_db=snr_db)
    samples, gt = signals.synthesize(sc)
    fe = FrontendConfig(sc.fs, 1024, plot_height)
    return plots_from(samples, fe), gt


@pytest.fixture(scope="session")
def sparse_small():
    """One 500-row plot of the sparse scenario with its ground truth."""
    plots, gt = scenario_plots("sparse", plot_height=500)
    return plots[0], gt


@pytest.fixture(scope="session")
def noise_plot():
    sc = scenarios.noise_only(plot_height=500)
    samples, _ = signals.synthesize(sc)
    return plots_from(samples, FrontendConfig(sc.fs, 1024, 500))[0]
