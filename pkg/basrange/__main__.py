#!/usr/bin/env python3
"""
python -m basrange
"""

import sys

from .cli import main

sys.exit(main())
