"""
Kinetics toolkit entry point.
Resolves environment defaults and hands the command line to kinetics.cli.
"""

import os
import sys

# Import shared utilities
from shared.debug_utils import set_debug, get_debug_log_path

# Import path-method registry and command layer
from kinetics import load_all_methods, get_available_methods
from kinetics.cli import main

# Set debug mode (can be controlled via environment variable)
debug_enabled = os.getenv('DEBUG', 'False').lower() == 'true'
set_debug(debug_enabled)

# Defaults for every command; command flags override them
DEFAULTS = {
    'seed': int(os.getenv('KINETICS_SEED', '20100101')),
    'workers': int(os.getenv('KINETICS_WORKERS', '1')),
    'out': os.getenv('KINETICS_OUT', 'results'),
}

# Load all path methods
load_all_methods()

if __name__ == '__main__':
    if debug_enabled:
        methods = [m['name'] for m in get_available_methods()]
        print(f"[APP] Path methods: {methods}; debug log at {get_debug_log_path()}")
    sys.exit(main(sys.argv[1:], DEFAULTS))
