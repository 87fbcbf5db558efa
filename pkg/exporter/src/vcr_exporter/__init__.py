"""Batch exporter: images and prompt ensembles to ".vcre" stores."""

__version__ = "0.1.0"

from .export import DEFAULT_TEMPLATES, ExportJob, export_image_embeddings, export_text_classifier
from .models import DEFAULT_MODEL, ToyPatchModel, load_model
from .vcre import read_store, write_store
