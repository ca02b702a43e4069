from __future__ import annotations


class BenchmarkError(ValueError):
    """Base class for every error raised by the benchmark services."""


class DimensionError(BenchmarkError):
    pass


class ContractError(BenchmarkError):
    pass


class NumericError(BenchmarkError):
    pass


class SchemaError(BenchmarkError):
    pass


class DataError(BenchmarkError):
    pass


class ConfigError(BenchmarkError):
    pass


class MetricUndefinedError(BenchmarkError):
    pass


class TrainingError(BenchmarkError):
    def __init__(self, message: str, epoch: int) -> None:
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ParseError(BenchmarkError):
    def __init__(self, message: str, *, line: int, record: int | None = None) -> None:
        where = f"line {line}" if record is None else f"record {record} (line {line})"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.record = record
