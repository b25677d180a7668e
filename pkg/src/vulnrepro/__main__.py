import sys

from vulnrepro.cli import main

sys.exit(main())
