import sys

from emf.cli import main

sys.exit(main())
