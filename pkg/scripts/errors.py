"""
Exception hierarchy for the cloth RL pipeline.
- Everything raised on purpose derives from ClothRLError so the CLI can catch it in one place
"""


class ClothRLError(Exception):
    """Base class for all pipeline errors."""


class SimulationInstabilityError(ClothRLError):
    def __init__(self, node, step=None):
        self.node = int(node)
        self.step = step
        where = f" at substep {step}" if step is not None else ""
        super().__init__(f"Non-finite force on particle {self.node}{where}; simulation exploded")


class InvalidActionError(ClothRLError):
    pass


class ShapeMismatchError(ClothRLError):
    pass


class MissingCacheError(ClothRLError):
    pass


class ArtifactFormatError(ClothRLError):
    pass


class EmptyDatasetError(ClothRLError):
    pass


class EmptySilhouetteError(ClothRLError):
    pass
