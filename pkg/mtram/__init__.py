"""MT-RAM：细粒度 / 粗粒度医疗编码的多任务分类引擎"""

__version__ = "0.1.0"
