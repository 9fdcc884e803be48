#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import os
import sys

from dotenv import load_dotenv

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.cli import main  # noqa: E402


if __name__ == "__main__":
    # .env supplies EXTERNAL_SCANNER_CMD / PACKER_CMD without clobbering variables already set
    load_dotenv(os.path.join(os.path.dirname(__file__), "..", ".env"), override=False)
    main()
