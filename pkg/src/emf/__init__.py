"""Event-camera object detection runtime built around a recurrent MetaFormer backbone."""

__version__ = "0.1.0"
