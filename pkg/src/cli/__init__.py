"""
Command-line interface.
"""

# Defer imports so `python -m src.cli.app` does not import the pipeline twice
__all__ = ["create_parser", "main"]

def create_parser():
    """Create the argument parser."""
    from .app import create_parser as _create_parser
    return _create_parser()

def main(argv=None):
    """Main entry point."""
    from .app import main as _main
    return _main(argv)
