class CardioError(Exception):
    """Base class for every failure the toolkit reports to the user."""

    exit_code = 1


class ConfigError(CardioError):
    exit_code = 2


class GeometryError(CardioError, ValueError):
    """Bad point cloud, graph or hierarchy request."""

    exit_code = 2


class StaleArtifactError(CardioError):
    exit_code = 3

    def __init__(self, artifact, reason):
        self.artifact = str(artifact)
        super().__init__(f"stale artifact {self.artifact}: {reason}")


class NumericalError(CardioError):
    exit_code = 4


class SimulationError(NumericalError):
    pass


class TrainingError(NumericalError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        if epoch is not None:
            message = f"{message} (epoch {epoch}, batch {batch})"
        super().__init__(message)


class GpFitError(NumericalError):
    pass
