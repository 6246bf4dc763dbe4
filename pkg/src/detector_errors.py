#!/usr/bin/env python3
"""
Detector Errors for gatdet
파이프라인 공통 예외 계층과 CLI 종료 코드 매핑
"""

from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class DetectorError(Exception):
    """gatdet 예외의 최상위 클래스"""

    exit_code = EXIT_DATA


class DimensionError(DetectorError, ValueError):
    """텐서 shape 불일치"""

    exit_code = EXIT_NUMERIC


class ParameterError(DetectorError, ValueError):
    """잘못된 파라미터 값 (음수 voxel 크기 등)"""

    exit_code = EXIT_USAGE


class ConfigError(DetectorError, ValueError):
    """설정 파일 검증 실패"""

    exit_code = EXIT_USAGE


class NumericError(DetectorError, ArithmeticError):
    """NaN/Inf 발생, 정의역 밖의 입력"""

    exit_code = EXIT_NUMERIC


class DataFormatError(DetectorError, ValueError):
    """입력 파일 포맷 오류 (byte offset 또는 line number 포함)"""

    exit_code = EXIT_DATA

    def __init__(self, message: str, offset: Optional[int] = None, line: Optional[int] = None):
        self.offset = offset
        self.line = line
        location = ""
        if offset is not None:
            location = f" (byte offset {offset})"
        elif line is not None:
            location = f" (line {line})"
        super().__init__(f"{message}{location}")


class CheckpointError(DetectorError, RuntimeError):
    """체크포인트 로드 실패 또는 설정 불일치"""

    exit_code = EXIT_DATA

    def __init__(self, message: str, version: Optional[int] = None):
        self.version = version
        suffix = f" [checkpoint format v{version}]" if version is not None else ""
        super().__init__(f"{message}{suffix}")


class SceneGenerationError(DetectorError, RuntimeError):
    """합성 장면 생성 불가 (박스 배치 실패)"""

    exit_code = EXIT_DATA


def exit_code_for(error: BaseException) -> int:
    """예외를 CLI 종료 코드로 변환"""
    if isinstance(error, DetectorError):
        return error.exit_code
    if isinstance(error, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return EXIT_DATA
    if isinstance(error, (FloatingPointError, OverflowError, ZeroDivisionError)):
        return EXIT_NUMERIC
    return EXIT_DATA
