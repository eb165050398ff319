"""Phaseless inverse scattering with background scatterers."""

from .budget import ErrorBudget, error_budget
from .fields import (GridSpec, SampledField, SobolevBudget, SpectralSamples, bessel_k,
                     bessel_kernel, fourier_transform, load_field, save_field, sobolev_budget)
from .forward import (PhaselessDataset, ProbeGeometry, born_amplitude, generate_dataset,
                      probe_vectors, scattering_amplitude, solve_lippmann_schwinger)
from .harness import ExperimentConfig, RateFit, SweepResult, emit_outputs, fit_rate, run_sweep
from .recon import (ReconConfig, ReconResult, SpectralEstimate, ZeroSetModel, reconstruct,
                    regularized_estimate_lattice, regularized_estimate_pair, spectral_estimate)
from .scatterers import (BackgroundFamily, BackgroundScatterer, Potential, build_background,
                         build_potential, make_family)

__version__ = "0.1.0"
