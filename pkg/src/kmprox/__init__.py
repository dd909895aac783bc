"""Kernel mirror prox for RKHS/measure saddle problems, with MMD-DRO and flow tools."""
from .rkhs import (HilbertBall, Kernel, RkhsFunction, dictionary_compress, evaluate, inner,
                   md_step_hilbert, mean_embedding, mmd)
from .measure import DiscreteMeasure, kl_divergence, md_step_measure, sample, tv_norm
from .saddle import (BlockDerivatives, BlockLipschitz, Box, GapSets, MmdMatchingGame,
                     SaddleProblem, SaddleState, make_mmd_matching_game)
from .solver import (RunRecord, StepSizes, duality_gap, kmp_run, kmp_run_stochastic,
                     step_size_diameter, step_size_theorem, theorem_bound)
from .dro import (DroProblem, LossSpec, dro_risk, epsilon_n, kmp_suboptimality_certificate,
                  robustness_report)

__version__ = "0.1.0"
