"""Quasimodes: Gaussian beams along broken rays and WKB modes."""
from .riccati import RiccatiSolution, riccati_solve
from .beam import (BeamAmplitude, BeamSegment, FermiFrame, FermiJet, GaussianBeam, PhaseJet,
                   ReflectedData, beam_coefficients, boundary_curvature, build_quasimode, cutoff,
                   default_delta, fermi_frame, fermi_jet, reflect_beam)
from .wkb import BumpProfile, WkbMode, wkb_mode
from .verify import (Patch, Quadrature, VerificationReport, beam_resolution, boundary_norm,
                     domain_quadrature, ray_length_in_domain, verify_quasimode)
