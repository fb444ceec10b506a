class StylerError(Exception):
    pass


class InvalidInput(StylerError, ValueError):
    pass


class ConfigError(StylerError, ValueError):
    pass


class DataError(StylerError, ValueError):
    pass


class UnknownSpeaker(StylerError, KeyError):
    def __str__(self):
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else "unknown speaker"


class CheckpointError(StylerError):
    pass


class TrainingDiverged(StylerError, RuntimeError):
    pass
