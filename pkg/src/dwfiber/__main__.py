import sys

from dwfiber.cli import main

sys.exit(main())
