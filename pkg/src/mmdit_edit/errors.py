"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations."""

    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class InjectionError(ValueError):
    """A hook could not be applied to a transformer block."""

    def __init__(self, message, block=None, head=None):
        where = []
        if block is not None:
            where.append(f"block {block}")
        if head is not None:
            where.append(f"head {head}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.block = block
        self.head = head


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class SingularityError(ValueError):
    """A time grid evaluates a conditional velocity too close to its pole."""


class StepError(RuntimeError):
    """A velocity evaluation failed inside an integrator."""

    def __init__(self, step, cause):
        super().__init__(f"velocity evaluation failed at step {step}: {cause}")
        self.step = step


class MaskError(ValueError):
    """Blend-mask construction received unusable input."""
