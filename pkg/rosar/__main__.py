import sys

from rosar.cli import main

sys.exit(main())
