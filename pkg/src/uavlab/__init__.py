"""UAV audio classification lab: audio DSP, mel features, a numpy autodiff
engine, CNN and AST models, parameter-efficient adapters and an experiment CLI."""

__version__ = "0.1.0"
