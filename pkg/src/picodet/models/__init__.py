from .detector import DetectorConfig, PicoDet, build_detector
from .esnet import ESNet, EsNetConfig, ShuffleNetV2

__all__ = ["DetectorConfig", "PicoDet", "build_detector", "ESNet", "EsNetConfig", "ShuffleNetV2"]
