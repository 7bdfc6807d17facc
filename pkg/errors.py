# errors.py
from typing import Optional


class PivotError(Exception):
    """本项目所有可预期错误的基类。CLI 将其映射为退出码 2。"""


class ConfigError(PivotError):
    pass


class DatasetFormatError(PivotError):
    """数据集文件不符合格式，携带出错的行号和字段名。"""

    def __init__(self, message: str, lineno: Optional[int] = None, field: Optional[str] = None):
        self.lineno = lineno
        self.field = field
        location = f"第 {lineno} 行" if lineno is not None else "数据集"
        if field:
            location += f" 字段 '{field}'"
        super().__init__(f"{location}: {message}")


class ShapeMismatchError(PivotError, ValueError):
    pass


class NonFiniteError(PivotError, FloatingPointError):
    pass


class DegenerateDimensionError(PivotError, ValueError):
    def __init__(self, dimension: int):
        self.dimension = dimension
        super().__init__(f"动作维度 {dimension} 的取值全部相同，无法划分分箱")


class PrimitiveParseError(PivotError):
    """VLM 输出无法解析或无法映射到原语分类表，保留原始文本以便回退和调试。"""

    def __init__(self, message: str, raw_text: str):
        self.raw_text = raw_text
        super().__init__(message)


class UnknownSkillError(PivotError, ValueError):
    pass


class PromptContextError(PivotError):
    pass


class VlmError(PivotError):
    pass


class VlmTimeoutError(VlmError):
    pass


class VlmTransportError(VlmError):
    pass


class VlmStatusError(VlmError):
    def __init__(self, status_code: int, body: str = ""):
        self.status_code = status_code
        self.body = body
        super().__init__(f"VLM 服务返回非成功状态码 {status_code}: {body[:200]}")


class PlacementError(PivotError):
    pass


class InstructionError(PivotError):
    pass


class ExpertError(PivotError):
    pass


class TrainingDivergedError(PivotError):
    pass
