import sys

from brwmf.cli import main

sys.exit(main())
