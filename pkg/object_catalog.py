# object_catalog.py
"""
桌面物体属性表：类别、功能描述、颜色、形状、RGB 与半径。
3/4 级指令用它生成不点名的描述。属性表为本仓库自拟。
"""
import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError

logger = logging.getLogger(__name__)

# 数据文件路径
DATA_FILE = Path(__file__).with_name("objects_data.json")


class CatalogEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: str
    category: str
    function: str
    color: str
    shape: str
    rgb: Tuple[int, int, int]
    radius: float = Field(ge=0.02, le=0.035)

    @model_validator(mode="after")
    def _function_hides_label(self) -> "CatalogEntry":
        # 功能描述用于 3 级指令，不能泄露物体名
        if self.label.lower() in self.function.lower():
            raise ValueError(f"物体 {self.label} 的功能描述包含了它自己的名字")
        return self

    @property
    def appearance(self) -> str:
        return f"{self.color} {self.shape}"


class ObjectCatalog(BaseModel):
    model_config = ConfigDict(frozen=True)

    objects: List[CatalogEntry]
    door: CatalogEntry

    @model_validator(mode="after")
    def _unique(self) -> "ObjectCatalog":
        labels = [o.label for o in self.objects]
        if len(set(labels)) != len(labels):
            raise ValueError("物体标签重复")
        colors = [o.color for o in self.objects]
        if len(set(colors)) != len(colors):
            raise ValueError("物体颜色重复，外观指代将不唯一")
        return self

    def by_label(self) -> Dict[str, CatalogEntry]:
        table = {o.label: o for o in self.objects}
        table[self.door.label] = self.door
        return table

    def entry(self, label: str) -> CatalogEntry:
        try:
            return self.by_label()[label]
        except KeyError:
            raise KeyError(f"属性表中没有物体 {label!r}")


def _load_data(path: Path) -> dict:
    """从 JSON 文件加载属性表。"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"物体属性表不存在: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"❌ {path} 文件内容格式错误: {e}")


@lru_cache(maxsize=4)
def load_catalog(path: Path = DATA_FILE) -> ObjectCatalog:
    try:
        catalog = ObjectCatalog.model_validate(_load_data(Path(path)))
    except ValidationError as e:
        raise ConfigError(f"物体属性表校验失败: {e}") from e
    logger.debug(f"✅ 已加载 {len(catalog.objects)} 个物体属性")
    return catalog


def object_labels() -> List[str]:
    return [o.label for o in load_catalog().objects]
