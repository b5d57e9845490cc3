"""Pathology-aware MRI-to-PET translation with a dual-arm conditional
diffusion model, trained with cycle-exchange consistency and evaluated on
synthetic paired phantom cohorts."""

__version__ = "0.1.0"
