import sys

from m3s.cli import main

sys.exit(main())
