"""Continuous-variable quantum repeater simulator.

Quantum-scissor entanglement distillation plus post-selected Gaussian
entanglement swapping on truncated Fock lattices, with Gaussian secret-key
rates, entanglement of formation, and direct-transmission baselines.
"""

from .channel import FiberChannel, SourceParams, apply_loss, tmsv, transmissivity
from .fock import (Mode, MultiModeDensity, MultiModeKet, displacement,
                   moments, partial_trace, tensor)
from .metrics import (CovarianceMatrixTM, KeyRateInputs, direct_transmission_key,
                      eof_gaussian, holevo_reverse, mutual_info, plob, raw_key,
                      symplectic_eigs)
from .rates import StageProbabilities, repeater_rate, secret_key_rate, z_steps
from .scissor import NlaParams, apply_qs, distilled_link, p_nla
from .swap import (ChainConfig, DisplacementGains, LinkParams,
                   PostSelectionRule, SwapOutcome, TwoLinkFamily,
                   averaged_state, chain_evaluate, dual_hd_project,
                   link_output_state, nested_swap, ps_probability)

__version__ = "0.1.0"
