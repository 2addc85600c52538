"""Exception types shared across the package."""


class IllConditionedError(ValueError):
    """A computation was refused because it sits too close to a singularity
    (e.g. the SE(3) logarithm at rotation angle pi)."""


class DegenerateInputError(ValueError):
    """Inputs carry no usable signal (e.g. zero-variance image in NCC)."""
