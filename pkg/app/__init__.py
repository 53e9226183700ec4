# SAGCN: semantic aspect-aware graph recommender
# Version 1.0.0
__version__ = "1.0.0"
