import sys

from mlss_iv.cli.cli_client import main

sys.exit(main())
