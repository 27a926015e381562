from palletmask.cli import main

raise SystemExit(main())
