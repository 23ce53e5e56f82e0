"""Cone-beam CT toolkit: simulation, FDK and plug-and-play reconstruction
with a 2.5D artifact-reduction prior, and defect-detection evaluation."""

__version__ = "0.1.0"
