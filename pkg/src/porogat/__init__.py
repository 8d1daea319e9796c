"""Private porosity prediction: importance-weighted Gaussian feature release
followed by a layer-stratified graph attention classifier."""

__version__ = "0.1.0"
