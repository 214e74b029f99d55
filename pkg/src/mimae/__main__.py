from mimae.cli import main
import sys

sys.exit(main())
