import sys

from sckls.main import main

sys.exit(main())
