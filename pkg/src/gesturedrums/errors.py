"""Exception types shared across the pipeline."""


class GestureDrumsError(Exception):
    """Base class for all pipeline errors."""


class AudioFormatError(GestureDrumsError):
    """Malformed or unsupported WAV data."""


class SampleRateMismatchError(AudioFormatError):
    """File sample rate differs from the configured pipeline rate."""

    def __init__(self, file_rate, expected_rate, path=None):
        self.file_rate = file_rate
        self.expected_rate = expected_rate
        where = f" in {path}" if path else ""
        super().__init__(
            f"sample rate {file_rate} Hz{where} does not match the "
            f"pipeline rate {expected_rate} Hz (resampling is out of scope)"
        )


class ConfigError(GestureDrumsError):
    """Inconsistent or invalid configuration."""


class NotTrainedError(GestureDrumsError):
    """Codec or model used before training / checkpoint load."""


class MaskedCellError(GestureDrumsError):
    """An operation that requires a fully resolved token grid hit a masked cell."""


class TrainingDivergedError(GestureDrumsError):
    """Loss became non-finite; state was rolled back to the last good snapshot."""

    def __init__(self, step, recent_losses):
        self.step = step
        self.recent_losses = list(recent_losses)
        tail = ", ".join(f"{x:.4g}" for x in self.recent_losses[-5:])
        super().__init__(f"non-finite loss at step {step} (recent losses: {tail})")


class TraceError(GestureDrumsError):
    """Generation trace is incomplete or does not match the given artifacts."""


class ContainerError(GestureDrumsError):
    """Checkpoint / feature-dump container is malformed."""


class MetricError(GestureDrumsError):
    """Metric preconditions violated (empty input, zero norm, bad tolerance)."""
