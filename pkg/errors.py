"""
Exception hierarchy shared by the library, the services and the CLI
"""


class DTNError(Exception):
    """Base class for every error raised by this package"""

    exit_code = 1


class ConfigError(DTNError):
    """Invalid configuration; carries every problem found, not just the first"""

    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__('; '.join(self.problems))


class ShapeError(DTNError, ValueError):
    """Tensor shapes that cannot be combined"""

    exit_code = 2


class DatasetFormatError(DTNError):
    """Malformed feature, caption, vocabulary or checkpoint file"""

    exit_code = 3

    def __init__(self, message: str, offset: int = None, path: str = None):
        self.offset = offset
        self.path = path
        where = []
        if path:
            where.append(str(path))
        if offset is not None:
            where.append(f'byte offset {offset}')
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class NumericalError(DTNError):
    """Non-finite loss or gradient"""

    exit_code = 4
