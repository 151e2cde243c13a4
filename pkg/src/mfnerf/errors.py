"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class MFNeRFError(Exception):
    exit_code = 1


class ConfigError(MFNeRFError, ValueError):
    """Invalid encoding/training configuration."""


class DomainError(MFNeRFError, ValueError):
    """Query point outside the unit domain, bad pixel, non-unit direction, ..."""


class ShapeError(MFNeRFError, ValueError):
    pass


class DataError(MFNeRFError):
    exit_code = 2


class CorruptFileError(DataError):
    pass


class IncompatibleConfigError(DataError):
    def __init__(self, field_name, expected, found):
        super().__init__(f"incompatible config: field {field_name} expected {expected}, found {found}")
        self.field = field_name


class TrainingDiverged(MFNeRFError, FloatingPointError):
    exit_code = 3

    def __init__(self, step, last_good_step):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint at step {last_good_step}")
        self.step = step
        self.last_good_step = last_good_step
